//! Flat-text configuration: UTF-8 `key = value` lines, `#` comments,
//! unknown keys rejected. CLI flags override file values.

use crate::error::{Error, Result};
use std::fmt;
use std::path::Path;

/// Pixel decoder variants; both share one interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelDecoderKind {
    /// Multi-scale top-down enrichment (default).
    Fem,
    /// Plain conv stack, kept for ablation.
    ConvStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Channel width C shared by the merged features, decoder, and heads.
    pub dim: usize,
    pub n_heads: usize,
    /// Feed-forward width; `None` resolves to `4 * dim`.
    pub d_ff: Option<usize>,
    /// Transformer decoder layer count L.
    pub layers: usize,
    /// Square input image size H = W; must be divisible by 8.
    pub image_size: usize,
    /// Support shots k per episode.
    pub shots: usize,
    pub lr: f64,
    /// Episodes per batch (the `ep` of the batch loss).
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub fold: usize,
    pub num_folds: usize,
    /// Dataset manifest path.
    pub data: Option<String>,
    pub freeze_backbone: bool,
    /// When false, the transformer decoder branch is dropped and a 1x1 conv
    /// head predicts the mask directly (ablation baseline).
    pub use_transformer: bool,
    /// When false, the prior mask is replaced by zeros (ablation hook).
    pub use_prior: bool,
    pub pixel_decoder: PixelDecoderKind,
    /// Widths of the three downsampling backbone stages; the last is C3.
    pub backbone_widths: [usize; 3],
    /// Channel counts of the dilated stages (c4, c5 feature maps).
    pub c4_channels: usize,
    pub c5_channels: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            dim: 64,
            n_heads: 1,
            d_ff: None,
            layers: 1,
            image_size: 64,
            shots: 1,
            lr: 1e-3,
            batch: 4,
            steps: 2000,
            seed: 0,
            fold: 0,
            num_folds: 4,
            data: None,
            freeze_backbone: false,
            use_transformer: true,
            use_prior: true,
            pixel_decoder: PixelDecoderKind::Fem,
            backbone_widths: [16, 32, 64],
            c4_channels: 128,
            c5_channels: 128,
        }
    }
}

impl Config {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "dim = {} must be positive and divisible by n_heads = {}",
                self.dim, self.n_heads
            )));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::config(format!(
                "image_size = {} must be divisible by 8",
                self.image_size
            )));
        }
        if self.shots == 0 {
            return Err(Error::config("shots must be >= 1".to_string()));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be >= 1".to_string()));
        }
        if self.num_folds == 0 || self.fold >= self.num_folds {
            return Err(Error::config(format!(
                "fold = {} out of range for num_folds = {}",
                self.fold, self.num_folds
            )));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1".to_string()));
        }
        if self.backbone_widths.iter().any(|&w| w == 0)
            || self.c4_channels == 0
            || self.c5_channels == 0
        {
            return Err(Error::config("backbone widths must be positive".to_string()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_str_kv(&text)
    }

    pub fn from_str_kv(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual form; rejects unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("key {key}: unparsable value {value:?}")))
        }
        match key {
            "dim" => self.dim = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "d_ff" => self.d_ff = Some(num(key, value)?),
            "layers" => self.layers = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "shots" => self.shots = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "fold" => self.fold = num(key, value)?,
            "num_folds" => self.num_folds = num(key, value)?,
            "data" => self.data = Some(value.to_string()),
            "freeze_backbone" => self.freeze_backbone = num(key, value)?,
            "use_transformer" => self.use_transformer = num(key, value)?,
            "use_prior" => self.use_prior = num(key, value)?,
            "pixel_decoder" => {
                self.pixel_decoder = match value {
                    "fem" => PixelDecoderKind::Fem,
                    "convstack" => PixelDecoderKind::ConvStack,
                    other => {
                        return Err(Error::config(format!(
                            "key pixel_decoder: expected fem|convstack, got {other:?}"
                        )))
                    }
                }
            }
            "backbone_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| num("backbone_widths", s.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::config(
                        "backbone_widths expects three comma-separated values".to_string(),
                    ));
                }
                self.backbone_widths = [parts[0], parts[1], parts[2]];
            }
            "c4_channels" => self.c4_channels = num(key, value)?,
            "c5_channels" => self.c5_channels = num(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Serializes to the same `key = value` form `from_str_kv` parses.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        push("dim", self.dim.to_string());
        push("n_heads", self.n_heads.to_string());
        push("d_ff", self.d_ff().to_string());
        push("layers", self.layers.to_string());
        push("image_size", self.image_size.to_string());
        push("shots", self.shots.to_string());
        push("lr", format!("{}", self.lr));
        push("batch", self.batch.to_string());
        push("steps", self.steps.to_string());
        push("seed", self.seed.to_string());
        push("fold", self.fold.to_string());
        push("num_folds", self.num_folds.to_string());
        if let Some(d) = &self.data {
            push("data", d.clone());
        }
        push("freeze_backbone", self.freeze_backbone.to_string());
        push("use_transformer", self.use_transformer.to_string());
        push("use_prior", self.use_prior.to_string());
        push("pixel_decoder", self.pixel_decoder.to_string());
        push(
            "backbone_widths",
            format!(
                "{},{},{}",
                self.backbone_widths[0], self.backbone_widths[1], self.backbone_widths[2]
            ),
        );
        push("c4_channels", self.c4_channels.to_string());
        push("c5_channels", self.c5_channels.to_string());
        s
    }
}

impl fmt::Display for PixelDecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PixelDecoderKind::Fem => write!(f, "fem"),
            PixelDecoderKind::ConvStack => write!(f, "convstack"),
        }
    }
}
