//! Run settings: defaults, TOML config file, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ofi_svar::ith::GmmConfig;
use ofi_svar::market_data::SessionBounds;
use ofi_svar::panel::{ProtocolConfig, RegressionOptions, WindowSpec};
use ofi_svar::sim::{BookSimConfig, PanelSimConfig, SimConfig};

/// Everything that can influence outputs. Every field can be set in the
/// config file; the common ones also have flags, which win over the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub threads: usize,
    pub window_min: usize,
    pub regimes: usize,
    pub max_lag: usize,
    pub horizon: usize,
    /// Bucket length of the intraday profile, minutes.
    pub bucket_min: usize,
    pub session: SessionBounds,
    pub gmm: GmmConfig,
    pub regression: RegressionOptions,
    pub panel: PanelSimConfig,
    pub svar: SimConfig,
    pub book: BookSimConfig,
}

impl Default for Settings {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        Self {
            seed: 1,
            threads: 0,
            window_min: 15,
            regimes: 3,
            max_lag: protocol.max_lag,
            horizon: protocol.horizon,
            bucket_min: 15,
            session: SessionBounds::default(),
            gmm: protocol.gmm,
            regression: RegressionOptions::default(),
            panel: PanelSimConfig::default(),
            svar: SimConfig::default(),
            book: BookSimConfig::default(),
        }
    }
}

/// Flag values that override the config file when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub window_min: Option<usize>,
    pub regimes: Option<usize>,
    pub max_lag: Option<usize>,
    pub rank_tol: Option<f64>,
}

impl Settings {
    pub fn load(config: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut s = match config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Settings::default(),
        };
        if let Some(v) = flags.seed {
            s.seed = v;
        }
        if let Some(v) = flags.threads {
            s.threads = v;
        }
        if let Some(v) = flags.window_min {
            s.window_min = v;
        }
        if let Some(v) = flags.regimes {
            s.regimes = v;
        }
        if let Some(v) = flags.max_lag {
            s.max_lag = v;
        }
        if let Some(v) = flags.rank_tol {
            s.gmm.rank_tol = v;
        }
        // One seed drives every generator.
        s.panel.seed = s.seed;
        s.svar.seed = s.seed;
        s.book.seed = s.seed;
        s.panel.session_open = s.session.open;
        s.panel.session_close = s.session.close;
        s.panel.window_secs = s.window_min * 60;
        s.panel.regime_secs = s.panel.window_secs.checked_div(s.regimes).unwrap_or(0);
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        SessionBounds::new(self.session.open, self.session.close)?;
        self.window_spec()?;
        if self.bucket_min == 0 {
            bail!("bucket_min must be positive");
        }
        if !(self.gmm.rank_tol >= 0.0) {
            bail!("rank tolerance must be non-negative");
        }
        Ok(())
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        Ok(WindowSpec::equal(self.window_min, self.regimes, self.session)?)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            max_lag: self.max_lag,
            horizon: self.horizon,
            gmm: self.gmm,
        }
    }
}
