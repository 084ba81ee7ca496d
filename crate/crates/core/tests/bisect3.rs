//! Attention-formation diagnostics on the trivial corpus.
//! Manual: `--ignored --nocapture`.

use distillkit_core::corpus::{pack_corpus, MaskPolicy, MaskedBatch};
use distillkit_core::encoder::{Capture, EncoderConfig, ModelState, Variant};
use distillkit_core::tokenizer::Vocab;
use distillkit_core::train::{evaluate_mlm, run_mlm_pretrain, NullObserver, RunConfig};

fn cfg(layers: usize, heads: usize, vocab: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden_dim: 64,
        embed_dim: 64,
        num_heads: heads,
        ffn_expansion: 4,
        vocab_size: vocab,
        max_position: 64,
        variant: Variant::Standard,
        bottleneck_dim: 0,
        num_ffn_blocks: 1,
        conv_kernel: 3,
    }
}

#[test]
#[ignore = "manual probe"]
fn attention_formation() {
    let text = "the quick brown fox jumps over the lazy dog\n".repeat(64);
    let vocab = Vocab::build(&text, 64, false).unwrap();
    let blocks = pack_corpus(&text, &vocab, 12);
    let all_mask = MaskPolicy { mask_prob: 1.0, random_prob: 0.0, ..MaskPolicy::default() };

    for (label, layers, heads, steps) in
        [("1L-4H", 1usize, 4usize, 2000usize), ("1L-1H", 1, 1, 2000), ("2L-4H", 2, 4, 2000)]
    {
        let config = cfg(layers, heads, vocab.size());
        let state = ModelState::init(&config, 1).unwrap();
        let rc = RunConfig {
            steps,
            batch_size: 8,
            eval_every: steps,
            learning_rate: 3e-3,
            dropout: 0.0,
            max_len: 12,
            mask_policy: all_mask,
            ..RunConfig::pretrain_defaults(steps, 7)
        };
        let (trained, _) =
            run_mlm_pretrain(state, &blocks, &vocab, &rc, None, &mut NullObserver).unwrap();
        let (l, a) = evaluate_mlm(&trained, &blocks, &vocab, &all_mask, 8, 5, 12).unwrap();

        // Attention entropy of the trained model on one clean block.
        let ids: Vec<u32> = blocks.block(0).to_vec();
        let batch = MaskedBatch::unmasked(&ids, &vec![1; 12], 1, 12);
        let out = trained.forward_infer(&batch, Capture::Full).unwrap();
        let mut ent = 0.0;
        let mut rows = 0;
        for attn in &out.attentions {
            for row in attn.value().data().chunks(12) {
                ent += -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
                rows += 1;
            }
        }
        eprintln!(
            "{label}: eval loss {l:.3} acc {a:.3} attn-entropy {:.3} (uniform {:.3})",
            ent / rows as f64,
            (12f64).ln()
        );
        // one attention row: where does position 5 look?
        let attn = out.attentions[0].value();
        let row = &attn.data()[5 * 12..6 * 12];
        eprintln!(
            "  head0 row5: {:?}",
            row.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }
}
