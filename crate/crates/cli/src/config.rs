use std::path::PathBuf;

use clap::Args;
use sinuscl::trainer::{Regime, TrainConfig};

use crate::CliError;

/// Training flags; each one overrides the same field of `--config`.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainFlags {
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Classifier epochs after contrastive pretraining.
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    /// Train the encoder during the classifier stage too.
    #[arg(long)]
    pub fine_tune: bool,
    #[arg(long)]
    pub eval_batch: Option<usize>,
    #[arg(long, env = "SINUSCL_SEED")]
    pub seed: Option<u64>,
}

pub fn load_config_file(path: &PathBuf) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Config file, then flags, then validation.
pub fn resolve(flags: &TrainFlags, regime: Option<Regime>) -> Result<TrainConfig, CliError> {
    let mut c = match &flags.config {
        Some(path) => load_config_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(r) = regime {
        c.regime = r;
    }
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.lr {
        c.lr = v;
    }
    if let Some(v) = flags.temperature {
        c.loss.temperature = v;
    }
    if let Some(v) = flags.lambda {
        c.loss.lambda = v;
    }
    if let Some(v) = flags.stage2_epochs {
        c.stage2_epochs = v;
    }
    if flags.fine_tune {
        c.fine_tune = true;
    }
    if let Some(v) = flags.eval_batch {
        c.eval_batch = v;
    }
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}
