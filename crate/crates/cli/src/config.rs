use std::fs;
use std::path::{Path, PathBuf};

use phonorec::audio::DEFAULT_MIN_PAD_SECONDS;
use phonorec::data::TranscriptFormat;
use phonorec::train::TrainOptions;
use serde::Deserialize;

use crate::{fail, Result};

/// The `train --config` file. Relative paths are taken from the config's
/// own directory. `model.n_classes` may be 0 to use the inventory size.
#[derive(Debug, Deserialize)]
pub struct TrainConfig {
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    /// Held-out share of `train_manifest` when there is no `val_manifest`.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Inventory tag or label file.
    pub inventory: String,
    #[serde(default = "default_transcripts")]
    pub transcripts: TranscriptFormat,
    #[serde(default = "default_pad")]
    pub min_pad_seconds: f64,
    #[serde(flatten)]
    pub options: TrainOptions,
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_transcripts() -> TranscriptFormat {
    TranscriptFormat::Phonemes
}

fn default_pad() -> f64 {
    DEFAULT_MIN_PAD_SECONDS
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| fail(format!("reading {}: {e}", path.display())))?;
        let mut cfg: TrainConfig =
            serde_json::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let under = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        cfg.train_manifest = under(&cfg.train_manifest);
        cfg.val_manifest = cfg.val_manifest.as_deref().map(under);
        if let TranscriptFormat::Words {
            lexicon: Some(l), ..
        } = &mut cfg.transcripts
        {
            *l = under(l);
        }
        let inv_path = base.join(&cfg.inventory);
        if phonorec::phonemize::load_inventory_str(&cfg.inventory).is_err() && inv_path.exists() {
            cfg.inventory = inv_path.to_string_lossy().into_owned();
        }
        for p in std::iter::once(&cfg.train_manifest).chain(cfg.val_manifest.as_ref()) {
            if !p.exists() {
                return Err(fail(format!("data path {} does not exist", p.display())));
            }
        }
        if !(0.0..1.0).contains(&cfg.val_fraction) {
            return Err(fail(format!(
                "val_fraction {} outside [0, 1)",
                cfg.val_fraction
            )));
        }
        Ok(cfg)
    }
}
