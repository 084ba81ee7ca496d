//! Pilot: convergence and timing for the desk-scale ordering experiment.
//! Run manually with `--ignored --nocapture`; not part of the suite.

use distillkit_core::corpus::{pack_corpus, synth_corpus, MaskPolicy, SynthSpec};
use distillkit_core::distill::{DistillPlan, DistillSuite};
use distillkit_core::encoder::{EncoderConfig, ModelState, Variant};
use distillkit_core::tokenizer::Vocab;
use distillkit_core::train::{
    evaluate_mlm, run_distillation, run_mlm_pretrain, NullObserver, RunConfig,
};
use std::time::Instant;

fn desk_config(layers: usize, vocab: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden_dim: 64,
        embed_dim: 64,
        num_heads: 4,
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
#[ignore = "manual pilot"]
fn pilot_convergence() {
    let spec = SynthSpec::biomedical(2400, 0.1);
    let corpus = synth_corpus(&spec, 42).unwrap();
    let text = corpus.train_text();
    let vocab = Vocab::build(&text, 256, false).unwrap();
    let blocks = pack_corpus(&text, &vocab, 32);
    let heldout = pack_corpus(&corpus.heldout_text(), &vocab, 32);
    eprintln!("vocab {} blocks {} heldout {}", vocab.size(), blocks.len(), heldout.len());
    let policy = MaskPolicy::default();

    // Teacher: 4L/64D, 3000 steps, batch 4.
    let teacher0 = ModelState::init(&desk_config(4, vocab.size()), 1).unwrap();
    let config = RunConfig {
        steps: 3000,
        batch_size: 4,
        eval_every: 500,
        learning_rate: 3e-3,
        ..RunConfig::pretrain_defaults(3000, 7)
    };
    let t0 = Instant::now();
    let (teacher, report) =
        run_mlm_pretrain(teacher0, &blocks, &vocab, &config, Some(&heldout), &mut NullObserver)
            .unwrap();
    eprintln!("teacher 3k steps in {:.0} s", t0.elapsed().as_secs_f64());
    for p in &report.points {
        eprintln!("  step {} loss {:.3} heldout-acc {:.3}", p.step, p.loss, p.accuracy);
    }
    let (tl, ta) = evaluate_mlm(&teacher, &heldout, &vocab, &policy, 8, 9001, 16).unwrap();
    eprintln!("teacher heldout: loss {tl:.3} acc {ta:.3}");

    // Baseline: random 2L student, plain MLM, 2000 steps.
    let student_cfg = desk_config(2, vocab.size());
    let base0 = ModelState::init(&student_cfg, 123).unwrap();
    let config = RunConfig {
        steps: 2000,
        batch_size: 4,
        eval_every: 500,
        learning_rate: 3e-3,
        ..RunConfig::pretrain_defaults(2000, 17)
    };
    let t0 = Instant::now();
    let (baseline, _) =
        run_mlm_pretrain(base0, &blocks, &vocab, &config, None, &mut NullObserver).unwrap();
    eprintln!("baseline 2k steps in {:.0} s", t0.elapsed().as_secs_f64());
    let (bl, ba) = evaluate_mlm(&baseline, &heldout, &vocab, &policy, 8, 9001, 16).unwrap();
    eprintln!("baseline heldout: loss {bl:.3} acc {ba:.3}");

    // Distilled students.
    for suite in
        [DistillSuite::DistilTriple, DistillSuite::TinyLayerwise, DistillSuite::CompactHybrid]
    {
        let plan = DistillPlan::build(suite, &student_cfg, &teacher.config, 3).unwrap();
        let config = RunConfig {
            steps: 2000,
            batch_size: 4,
            eval_every: 500,
            learning_rate: 15e-4,
            ..RunConfig::distill_defaults(2000, 29)
        };
        let t0 = Instant::now();
        let (student, rep) = run_distillation(
            &teacher,
            &student_cfg,
            plan,
            &blocks,
            &vocab,
            &config,
            &mut NullObserver,
        )
        .unwrap();
        let (sl, sa) = evaluate_mlm(&student, &heldout, &vocab, &policy, 8, 9001, 16).unwrap();
        eprintln!(
            "{}: {:.0} s, first-loss {:.3} last-loss {:.3}, heldout loss {sl:.3} acc {sa:.3}",
            suite.name(),
            t0.elapsed().as_secs_f64(),
            rep.points.first().unwrap().loss,
            rep.points.last().unwrap().loss,
        );
    }
}
