// Scratch calibration harness for sizing the behavioral test configs.
// Not part of the deliverable test suite; run with:
//   cargo run --example calibrate -- <mode> [seed]
use std::time::Instant;

use vidfm::adapt::{adapt_train, task_labels, AdaptHyper, AdaptRegime, ProbeKind, TaskKind};
use vidfm::checkpoint::Checkpoint;
use vidfm::config::Config;
use vidfm::corpus::{generate, Corpus, SyntheticCorpusSpec};
use vidfm::stage1::{eval_in_batch_retrieval, train_stage1, vocab_from_checkpoint, Stage1Config};
use vidfm::stage2::train_stage2;

fn corpus_with(n: usize, seed: u64, motion_captions: bool) -> Corpus {
    let mut spec = SyntheticCorpusSpec::toy(n, seed);
    spec.caption_templates = if motion_captions {
        SyntheticCorpusSpec::default_templates_with_motion()
    } else {
        SyntheticCorpusSpec::default_templates_appearance_only()
    };
    generate(&spec).unwrap()
}

fn hard_corpus(n: usize, seed: u64) -> Corpus {
    use vidfm::corpus::ColorKind;
    let mut spec = SyntheticCorpusSpec::toy(n, seed);
    spec.caption_templates = SyntheticCorpusSpec::default_templates_appearance_only();
    spec.colors = vec![
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::Magenta,
        ColorKind::Cyan,
    ];
    spec.radii = vec![4.0, 5.0];
    spec.background_noise = 0.35;
    generate(&spec).unwrap()
}

fn base_config(seed: u64, s1_steps: u64, s2_steps: u64) -> Config {
    let mut c = Config::toy_defaults();
    c.set("seed", seed.to_string());
    c.set("stage1.total_steps", s1_steps.to_string());
    c.set("stage1.warmup_steps", (s1_steps / 10).max(1).to_string());
    c.set("stage1.eval_every", "0");
    c.set("stage2.total_steps", s2_steps.to_string());
    c.set("stage2.warmup_steps", (s2_steps / 10).max(1).to_string());
    c.set("stage2.eval_every", "0");
    c.set("stage2.batch_size", "16");
    c
}

fn probe(ck: &Checkpoint, probe_corpus: &Corpus, kind: TaskKind, cfg: &Config, seed: u64) -> f64 {
    let enc = vidfm::stage1::encoder_config_from(cfg).unwrap();
    let task = task_labels(probe_corpus, kind).unwrap();
    let n = probe_corpus.len();
    let order = vidfm::util::shuffle_indices(&mut vidfm::util::rng_from(seed ^ 0xabc), n);
    let cut = n / 2;
    let hyper = AdaptHyper { steps: 600, lr: 3e-3, batch: 16, seed };
    let out = adapt_train(
        &ck.params,
        &enc,
        AdaptRegime::Frozen(ProbeKind::Map),
        probe_corpus,
        &task,
        &order[..cut],
        &order[cut..],
        hyper,
    )
    .unwrap();
    out.accuracy
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("c6");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    match mode {
        "c6" => {
            // Criterion 6 shape: motion-caption corpus, R@1 on held-out.
            let s1_steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
            let t0 = Instant::now();
            let train = corpus_with(512, 100 + seed, true);
            let heldout = corpus_with(128, 900 + seed, true);
            let cfg = base_config(seed, s1_steps, 0);
            let run = train_stage1(&cfg, std::slice::from_ref(&train), None, &[], None).unwrap();
            let vocab = vocab_from_checkpoint(&run.checkpoint).unwrap();
            let s1 = Stage1Config::from_config(&cfg, vocab.size()).unwrap();
            let r1 = eval_in_batch_retrieval(
                &run.checkpoint.params,
                &s1.enc,
                &s1.text,
                &vocab,
                &heldout,
                32,
            )
            .unwrap();
            println!(
                "c6 seed {seed} steps {s1_steps}: heldout R@1 = {:.3} ({:.1} min)",
                r1,
                t0.elapsed().as_secs_f64() / 60.0
            );
        }
        "c7" => {
            // Criterion 7 shape: appearance-caption teacher, stage-2 student,
            // motion/appearance probes.
            let s1_steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1500);
            let s2_steps: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(800);
            let t0 = Instant::now();
            let train = hard_corpus(384, 100 + seed);
            let probe_corpus = hard_corpus(512, 500 + seed);
            let cfg = base_config(seed, s1_steps, s2_steps);
            let teacher = train_stage1(&cfg, std::slice::from_ref(&train), None, &[], None)
                .unwrap()
                .checkpoint;
            let t_teacher = t0.elapsed().as_secs_f64();
            let student = train_stage2(&cfg, &teacher, &train, None, None).unwrap().checkpoint;
            let t_student = t0.elapsed().as_secs_f64() - t_teacher;

            let tm = probe(&teacher, &probe_corpus, TaskKind::Motion, &cfg, seed);
            let ta = probe(&teacher, &probe_corpus, TaskKind::Appearance, &cfg, seed);
            let sm = probe(&student, &probe_corpus, TaskKind::Motion, &cfg, seed);
            let sa = probe(&student, &probe_corpus, TaskKind::Appearance, &cfg, seed);
            println!(
                "c7 seed {seed} (s1 {s1_steps}, s2 {s2_steps}): teacher motion {tm:.3} app {ta:.3} | student motion {sm:.3} app {sa:.3} | motion gap {:+.3} app gap {:+.3}",
                sm - tm,
                sa - ta
            );
            println!(
                "   times: teacher {:.1} min, student {:.1} min, total {:.1} min",
                t_teacher / 60.0,
                t_student / 60.0,
                t0.elapsed().as_secs_f64() / 60.0
            );
        }
        "c8" => {
            // Criterion 8 shape: ablations vs full stage-2 config.
            let s1_steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1500);
            let s2_steps: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(800);
            let train = hard_corpus(384, 100 + seed);
            let probe_corpus = hard_corpus(512, 500 + seed);
            let cfg = base_config(seed, s1_steps, s2_steps);
            let teacher = train_stage1(&cfg, std::slice::from_ref(&train), None, &[], None)
                .unwrap()
                .checkpoint;
            let full = train_stage2(&cfg, &teacher, &train, None, None).unwrap().checkpoint;
            let mut no_shuffle_cfg = cfg.clone();
            no_shuffle_cfg.set("stage2.shuffle", "false");
            let no_shuffle =
                train_stage2(&no_shuffle_cfg, &teacher, &train, None, None).unwrap().checkpoint;
            let mut no_global_cfg = cfg.clone();
            no_global_cfg.set("stage2.global_distill", "false");
            let no_global =
                train_stage2(&no_global_cfg, &teacher, &train, None, None).unwrap().checkpoint;

            let fm = probe(&full, &probe_corpus, TaskKind::Motion, &cfg, seed);
            let fa = probe(&full, &probe_corpus, TaskKind::Appearance, &cfg, seed);
            let nsm = probe(&no_shuffle, &probe_corpus, TaskKind::Motion, &cfg, seed);
            let nga = probe(&no_global, &probe_corpus, TaskKind::Appearance, &cfg, seed);
            println!(
                "c8 seed {seed}: full motion {fm:.3} app {fa:.3} | no-shuffle motion {nsm:.3} (gap {:+.3}) | no-global app {nga:.3} (gap {:+.3})",
                fm - nsm,
                fa - nga
            );
        }
        other => eprintln!("unknown mode {other}"),
    }
}
