use serde::{Deserialize, Serialize};

use crate::autodiff::DropoutMode;
use crate::error::{Error, Result};

/// Hyperparameters of the encoder-decoder.
///
/// `Default` gives the desk-scale configuration; [`ModelConfig::paper_scale`]
/// gives the full-size one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub dropout_mode: DropoutMode,
    pub label_smoothing: f64,
    /// 1-based encoder layer whose attention sublayer has no residual path.
    pub residual_removal_layer: Option<usize>,
    /// Queries of the modified layer come from fixed sinusoids instead of
    /// the layer input.
    pub position_query_enabled: bool,
    pub query_wavelength: f64,
    pub input_pe_wavelength: f64,
    pub vocab_size: usize,
    pub num_languages: usize,
    /// 0 means `d_model / 8`.
    pub lang_embed_dim: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_encoder_layers: 5,
            num_decoder_layers: 5,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            dropout_rate: 0.2,
            dropout_mode: DropoutMode::Elementwise,
            label_smoothing: 0.1,
            residual_removal_layer: None,
            position_query_enabled: false,
            query_wavelength: 100.0,
            input_pe_wavelength: 10_000.0,
            vocab_size: 0,
            num_languages: 0,
            lang_embed_dim: 0,
            max_positions: 64,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// 512-dim, 8-head, 2048 inner size.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 512,
            num_heads: 8,
            d_ff: 2048,
            max_positions: 256,
            ..Self::default()
        }
    }

    /// Middle layer `ceil((L + 1) / 2)`: 3 of 5, 5 of 8, 2 of 3.
    pub fn default_removal_layer(num_layers: usize) -> usize {
        (num_layers + 2) / 2
    }

    /// Enable residual removal at the default middle layer.
    pub fn with_default_removal(mut self) -> Self {
        self.residual_removal_layer = Some(Self::default_removal_layer(self.num_encoder_layers));
        self
    }

    pub fn lang_dim(&self) -> usize {
        if self.lang_embed_dim == 0 {
            (self.d_model / 8).max(1)
        } else {
            self.lang_embed_dim
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn is_modified(&self) -> bool {
        self.residual_removal_layer.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
            return fail("layer counts must be positive".into());
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return fail("d_model must be even for sinusoidal encodings".into());
        }
        if let Some(l) = self.residual_removal_layer {
            if l == 0 || l > self.num_encoder_layers {
                return fail(format!(
                    "residual_removal_layer {l} outside 1..={}",
                    self.num_encoder_layers
                ));
            }
        } else if self.position_query_enabled {
            return fail("position_query_enabled requires residual_removal_layer".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1]", self.label_smoothing));
        }
        if self.query_wavelength <= 0.0 || self.input_pe_wavelength <= 0.0 {
            return fail("wavelengths must be positive".into());
        }
        if self.vocab_size == 0 || self.num_languages == 0 {
            return fail("vocab_size and num_languages must be set".into());
        }
        if self.max_positions == 0 || self.layer_norm_eps <= 0.0 {
            return fail("max_positions and layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let e = self.lang_dim();
        let attn = 4 * d * d + 4 * d;
        let ff = 2 * d * self.d_ff + self.d_ff + d;
        let ln = 2 * d;
        let enc_layer = attn + ff + 2 * ln;
        let dec_layer = 2 * attn + ff + 3 * ln;
        self.vocab_size * d
            + self.num_languages * e
            + (d + e) * d
            + d
            + self.num_encoder_layers * enc_layer
            + self.num_decoder_layers * dec_layer
            + 2 * ln
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            num_languages: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_removal_layers() {
        assert_eq!(ModelConfig::default_removal_layer(5), 3);
        assert_eq!(ModelConfig::default_removal_layer(8), 5);
        assert_eq!(ModelConfig::default_removal_layer(3), 2);
    }

    #[test]
    fn validation() {
        assert!(valid().validate().is_ok());
        let mut c = valid();
        c.residual_removal_layer = Some(6);
        assert!(c.validate().is_err());
        let mut c = valid();
        c.residual_removal_layer = Some(0);
        assert!(c.validate().is_err());
        let mut c = valid();
        c.position_query_enabled = true;
        assert!(c.validate().is_err());
        c.residual_removal_layer = Some(3);
        assert!(c.validate().is_ok());
        let mut c = valid();
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_rejects_unknown_keys() {
        let err = toml::from_str::<ModelConfig>("d_model = 32\nbogus = 1\n");
        assert!(err.is_err());
        let ok: ModelConfig = toml::from_str("d_model = 32\ndropout_mode = \"variational\"\n").unwrap();
        assert_eq!(ok.d_model, 32);
        assert_eq!(ok.dropout_mode, DropoutMode::Variational);
    }
}
