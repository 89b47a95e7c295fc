//! Medium-weight behavioral checks: LiT tuning improves retrieval,
//! zero-shot direction classification beats chance, alignment statistics
//! separate caption tiers, and the stage-2 objective improves monotonically
//! on held-out clips.

use vidfm::adapt::{lit_tune, multi_choice_accuracy, task_labels, zero_shot_classify_task, TaskKind};
use vidfm::config::Config;
use vidfm::corpus::{generate, ColorKind, Corpus, ShapeKind, SyntheticCorpusSpec, Tier, VideoClip};
use vidfm::metrics::MetricRecord;
use vidfm::stage1::{
    embed_texts, embed_videos, eval_in_batch_retrieval, train_stage1, vocab_from_checkpoint,
    Stage1Config,
};
use vidfm::stage2::train_stage2;

fn small_config(s1_steps: u64) -> Config {
    let mut c = Config::toy_defaults();
    c.set("stage1.total_steps", s1_steps.to_string());
    c.set("stage1.warmup_steps", (s1_steps / 10).max(1).to_string());
    c.set("stage1.eval_every", "0");
    c.set("stage1.batch_size", "16");
    c.set("seed", "5");
    c
}

fn motion_corpus(n: usize, seed: u64) -> Corpus {
    let spec = SyntheticCorpusSpec::toy(n, seed);
    generate(&spec).unwrap()
}

/// Eight-direction corpus for the zero-shot motion test.
fn direction_corpus(n: usize, seed: u64) -> Corpus {
    use vidfm::corpus::MotionKind::*;
    let mut spec = SyntheticCorpusSpec::toy(n, seed);
    spec.motions = vec![Left, Right, Up, Down, UpLeft, UpRight, DownLeft, DownRight];
    spec.shapes = vec![ShapeKind::Circle, ShapeKind::Square];
    spec.colors = vec![ColorKind::Red, ColorKind::Blue];
    spec.radii = vec![6.0];
    generate(&spec).unwrap()
}

#[test]
fn lit_improves_retrieval_and_zero_shot_beats_chance() {
    // One stage-1 model trained on the eight-direction corpus, then LiT
    // against a hold-out: R@1 must improve over the un-tuned pairing and
    // zero-shot direction accuracy must clear 4x chance.
    let mut config = small_config(700);
    config.set("lit.steps", "500");
    config.set("lit.base_lr", "2e-4");
    let train = direction_corpus(256, 21);
    let lit_corpus = direction_corpus(256, 22);
    let heldout = direction_corpus(96, 23);

    let s1run = train_stage1(&config, std::slice::from_ref(&train), None, &[], None).unwrap();
    let teacher = s1run.checkpoint;
    let vocab = vocab_from_checkpoint(&teacher).unwrap();
    let s1 = Stage1Config::from_config(&config, vocab.size()).unwrap();

    let before = eval_in_batch_retrieval(
        &teacher.params,
        &s1.enc,
        &s1.text,
        &vocab,
        &heldout,
        32,
    )
    .unwrap();

    let lit = lit_tune(&config, &teacher, &teacher, &vocab, &lit_corpus, None).unwrap();
    let after =
        eval_in_batch_retrieval(&lit.params, &s1.enc, &s1.text, &vocab, &heldout, 32).unwrap();
    println!("LiT heldout R@1: before {before:.3} after {after:.3}");
    assert!(
        after > before,
        "LiT tuning must improve held-out R@1: {before:.3} -> {after:.3}"
    );

    // Zero-shot motion direction: 8 classes, chance 0.125, need >= 0.5.
    let task = task_labels(&heldout, TaskKind::Motion).unwrap();
    assert_eq!(task.n_classes, 8);
    let class_words: Vec<String> = {
        let mut keys: Vec<(String, String)> = heldout
            .rows
            .iter()
            .map(|r| (format!("{:?}", r.motion), format!("shape {}", r.motion.phrase())))
            .collect();
        keys.sort();
        keys.dedup();
        keys.into_iter().map(|(_, w)| w).collect()
    };
    let templates = vec!["a video of a {}".to_string(), "a {}".to_string()];
    let acc = zero_shot_classify_task(
        &lit.params,
        &s1,
        &vocab,
        &heldout,
        &task,
        &class_words,
        &templates,
    )
    .unwrap();
    let chance = 1.0 / task.n_classes as f64;
    println!("zero-shot direction accuracy {acc:.3} (chance {chance:.3})");
    assert!(
        acc >= 4.0 * chance,
        "zero-shot direction accuracy {acc:.3} below 4x chance {:.3}",
        4.0 * chance
    );

    // Multi-choice retrieval over segment groups of the held-out corpus:
    // picking each clip's own caption among its group must beat chance.
    let clips: Vec<&VideoClip> = heldout.clips.iter().take(8).collect();
    let caps: Vec<&str> = heldout.rows.iter().take(8).map(|r| r.caption.as_str()).collect();
    let v = embed_videos(&lit.params, &s1.enc, &clips, 8).unwrap();
    let t = embed_texts(&lit.params, &s1.text, &vocab, &caps, 8).unwrap();
    let mc = multi_choice_accuracy(&v, &t).unwrap();
    println!("multi-choice accuracy {mc:.3}");
    assert!(mc > 1.0 / 8.0, "multi-choice accuracy at or below chance: {mc}");
}

#[test]
fn alignment_statistics_separate_caption_tiers() {
    // LiT-style alignment: mean cosine of paired embeddings must be lower
    // on the corrupted-caption tier than on the clean tier.
    let config = small_config(500);
    let train = motion_corpus(192, 31);
    let run = train_stage1(&config, std::slice::from_ref(&train), None, &[], None).unwrap();
    let vocab = vocab_from_checkpoint(&run.checkpoint).unwrap();
    let s1 = Stage1Config::from_config(&config, vocab.size()).unwrap();

    let mut clean_spec = SyntheticCorpusSpec::toy(96, 77);
    clean_spec.corruption_rate = 0.7;
    let clean = generate(&clean_spec).unwrap();
    let mut noisy_spec = clean_spec.clone();
    noisy_spec.tier = Tier::Noisy;
    let noisy = generate(&noisy_spec).unwrap();

    let alignment = |corpus: &Corpus| -> f64 {
        let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
        let caps: Vec<&str> = corpus.rows.iter().map(|r| r.caption.as_str()).collect();
        let v = embed_videos(&run.checkpoint.params, &s1.enc, &clips, 32).unwrap();
        let t = embed_texts(&run.checkpoint.params, &s1.text, &vocab, &caps, 32).unwrap();
        let sims: Vec<f64> = v
            .iter()
            .zip(&t)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
            .collect();
        sims.iter().sum::<f64>() / sims.len() as f64
    };
    let clean_mean = alignment(&clean);
    let noisy_mean = alignment(&noisy);
    println!("alignment clean {clean_mean:.4} vs noisy {noisy_mean:.4}");
    assert!(
        clean_mean > noisy_mean,
        "clean tier must align better: {clean_mean:.4} vs {noisy_mean:.4}"
    );
}

#[test]
fn stage2_heldout_similarity_rises_monotonically() {
    // Five eval points on a held-out corpus: the mean token cosine
    // similarity to the teacher must stay at or above its first value.
    let mut config = small_config(300);
    config.set("stage2.total_steps", "250");
    config.set("stage2.warmup_steps", "25");
    config.set("stage2.eval_every", "50");
    config.set("stage2.batch_size", "8");
    let train = motion_corpus(96, 41);
    let heldout = motion_corpus(16, 42);
    let teacher = train_stage1(&config, std::slice::from_ref(&train), None, &[], None)
        .unwrap()
        .checkpoint;
    let run = train_stage2(&config, &teacher, &train, Some(&heldout), None).unwrap();
    let sims: Vec<(u64, f64)> = run
        .metrics
        .iter()
        .filter(|m| m.metric == "token_cosine_sim")
        .map(|m| (m.step, m.value))
        .collect();
    println!("held-out token cosine per eval point: {sims:?}");
    assert!(sims.len() >= 5, "expected at least 5 eval points, got {}", sims.len());
    let first = sims[0].1;
    for (step, sim) in &sims[1..] {
        assert!(
            *sim >= first,
            "similarity at step {step} ({sim:.4}) fell below the first eval ({first:.4})"
        );
    }
}

#[test]
fn metric_records_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let records =
        vec![MetricRecord::new("stage1", "train", "loss", 1.25, 7, 100)];
    vidfm::metrics::write_records(&path, &records).unwrap();
    assert_eq!(vidfm::metrics::read_records(&path).unwrap(), records);
}
