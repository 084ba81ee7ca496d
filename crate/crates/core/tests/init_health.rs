//! Initialization health: a freshly initialized desk-scale encoder must be
//! materially context-sensitive, or MLM training cannot bootstrap the
//! attention pathway.

use distillkit_core::corpus::MaskedBatch;
use distillkit_core::encoder::{init_sigma, Capture, EncoderConfig, ModelState, Variant};

#[test]
fn sigma_scales_with_width() {
    assert_eq!(init_sigma(768), 0.02, "full width keeps the flat convention");
    assert!(init_sigma(64) > 0.06);
    assert!(init_sigma(8) > 0.17);
}

#[test]
fn fresh_model_is_context_sensitive() {
    let config = EncoderConfig {
        num_layers: 2,
        hidden_dim: 64,
        embed_dim: 64,
        num_heads: 4,
        ffn_expansion: 4,
        vocab_size: 64,
        max_position: 32,
        variant: Variant::Standard,
        bottleneck_dim: 0,
        num_ffn_blocks: 1,
        conv_kernel: 3,
    };
    let state = ModelState::init(&config, 17).unwrap();
    // Swap one context token and look at the logit movement elsewhere.
    let a = MaskedBatch::unmasked(&[7, 9, 7, 7], &[1; 4], 1, 4);
    let b = MaskedBatch::unmasked(&[7, 12, 7, 7], &[1; 4], 1, 4);
    let oa = state.forward_infer(&a, Capture::LogitsOnly).unwrap();
    let ob = state.forward_infer(&b, Capture::LogitsOnly).unwrap();
    let v = config.vocab_size;
    let ra = &oa.mlm_logits.value().data()[3 * v..4 * v];
    let rb = &ob.mlm_logits.value().data()[3 * v..4 * v];
    let max_diff = ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
    assert!(
        max_diff > 1e-3,
        "context change moved logits by only {max_diff:e}; the attention path is starved"
    );
}
