//! Architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// No class token; the head reads the mean over final tokens.
    Pool,
    /// A learnable class token is prepended. Requires a single full-grid window.
    GlobalToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    /// Inverted residual block: expand, depthwise conv, project.
    Irb,
    /// Two-layer GELU feed-forward network.
    Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Patch grid geometry derived from a [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub cls_mode: ClsMode,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_h == 0 || self.image_w == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::config("image, patch and embedding sizes must be positive"));
        }
        if !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    /// Number of patch tokens, `(H/P)(W/P)`.
    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Flattened patch length, `P * P * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.cls_mode == ClsMode::GlobalToken)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub expansion: usize,
    pub kernel_size: usize,
    /// Hidden width multiplier of the FFN sub-layer.
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub head_dropout: f64,
    pub sublayer: SublayerKind,
    pub stage_merging: bool,
    pub cls_mode: ClsMode,
    pub irb_inner_skip: bool,
    /// GELU after expansion and after the depthwise conv. Off only for
    /// algebraic tests.
    pub irb_activations: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 224x224 input, 16x16 patches, one stage of four blocks.
    pub fn full() -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 96,
            depths: vec![4],
            heads: vec![3],
            window_size: 7,
            expansion: 4,
            kernel_size: 3,
            ffn_ratio: 4,
            num_classes: 5,
            head_dropout: 0.3,
            sublayer: SublayerKind::Irb,
            stage_merging: false,
            cls_mode: ClsMode::Pool,
            irb_inner_skip: true,
            irb_activations: true,
            ln_eps: 1e-5,
        }
    }

    /// 8x8 input, 2x2 patches, two blocks of width 8 with 2x2 windows.
    pub fn tiny() -> Self {
        Self {
            image_height: 8,
            image_width: 8,
            patch_size: 2,
            embed_dim: 8,
            depths: vec![2],
            heads: vec![2],
            window_size: 2,
            expansion: 2,
            ..Self::full()
        }
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            image_h: self.image_height,
            image_w: self.image_width,
            channels: self.channels,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            cls_mode: self.cls_mode,
        }
    }

    /// `(grid_h, grid_w, dim)` at the start of every stage.
    pub fn stage_geometry(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.patch().grid();
        let mut d = self.embed_dim;
        let mut out = Vec::with_capacity(self.depths.len());
        for s in 0..self.depths.len() {
            if s > 0 && self.stage_merging {
                h /= 2;
                w /= 2;
                d *= 2;
            }
            out.push((h, w, d));
        }
        out
    }

    pub fn final_dim(&self) -> usize {
        self.stage_geometry().last().map_or(self.embed_dim, |g| g.2)
    }

    /// Window side actually used at a stage: the configured size, clipped to the grid.
    pub fn stage_window(&self, stage: usize) -> usize {
        let (h, w, _) = self.stage_geometry()[stage];
        self.window_size.min(h).min(w)
    }

    /// Cyclic shift for block `block` of stage `stage`: zero on even blocks,
    /// half a window on odd blocks, and always zero when one window covers
    /// the whole grid.
    pub fn block_shift(&self, stage: usize, block: usize) -> usize {
        let (h, w, _) = self.stage_geometry()[stage];
        let m = self.stage_window(stage);
        if block % 2 == 1 && (m < h || m < w) {
            m / 2
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch().validate()?;
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(Error::config(format!(
                "depths {:?} and heads {:?} must be non-empty and of equal length",
                self.depths, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config(format!("head_dropout {} not in [0, 1)", self.head_dropout)));
        }
        if self.window_size == 0 {
            return Err(Error::config("window_size must be positive"));
        }
        if self.expansion == 0 || self.ffn_ratio == 0 {
            return Err(Error::config("expansion and ffn_ratio must be at least 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps must be finite and non-negative"));
        }
        let geometry = self.stage_geometry();
        for (s, &(h, w, d)) in geometry.iter().enumerate() {
            if s > 0 && self.stage_merging {
                let (ph, pw, _) = geometry[s - 1];
                if ph % 2 != 0 || pw % 2 != 0 {
                    return Err(Error::config(format!("stage {s}: cannot merge odd grid {ph}x{pw}")));
                }
            }
            if h == 0 || w == 0 {
                return Err(Error::config(format!("stage {s}: grid collapsed to {h}x{w}")));
            }
            let heads = self.heads[s];
            if heads == 0 || d % heads != 0 {
                return Err(Error::config(format!("stage {s}: dim {d} not divisible by {heads} heads")));
            }
            let m = self.stage_window(s);
            if h % m != 0 || w % m != 0 {
                return Err(Error::config(format!("stage {s}: grid {h}x{w} not divisible by window {m}")));
            }
        }
        if self.cls_mode == ClsMode::GlobalToken {
            let (h, w) = self.patch().grid();
            if self.stage_merging || self.window_size < h || self.window_size < w {
                return Err(Error::config(
                    "global_token mode needs one window covering the full grid and no stage merging",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::full().patch().num_patches(), 196);
        assert_eq!(ModelConfig::full().patch().patch_dim(), 768);
    }

    #[test]
    fn shifts_alternate() {
        let mut c = ModelConfig::tiny();
        c.depths = vec![4];
        let shifts: Vec<usize> = (0..4).map(|b| c.block_shift(0, b)).collect();
        assert_eq!(shifts, vec![0, 1, 0, 1]);
        assert_eq!((0..4).map(|b| ModelConfig::full().block_shift(0, b)).collect::<Vec<_>>(), vec![0, 3, 0, 3]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut c = ModelConfig::tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::tiny();
        c.heads = vec![3];
        assert!(c.validate().is_err());

        let mut c = ModelConfig::tiny();
        c.window_size = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::tiny();
        c.cls_mode = ClsMode::GlobalToken;
        assert!(c.validate().is_err());
        c.window_size = 4;
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_rejects_unknown_keys() {
        let c = ModelConfig::tiny();
        let text = toml::to_string(&c).unwrap();
        let back: ModelConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
    }
}
