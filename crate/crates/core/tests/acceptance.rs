//! End-to-end acceptance checks, run in sequence inside one test so the
//! timed criteria are not competing with each other for cores.
//!
//! Each criterion prints one `PASS`/`FAIL` line; the test fails if any did.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pose_distill::autograd::{Graph, Var};
use pose_distill::data::{
    generate_synthetic_dataset, load_reid_root, sample_pair_batch, write_dataset, Dataset, PairBatch, PairSampler, Split,
    SynthSpec,
};
use pose_distill::eval::{evaluate, evaluate_distances, extract_embeddings, reference_evaluate, Labels, Protocol};
use pose_distill::losses::{
    adversarial_discriminator_loss, adversarial_generator_loss, reconstruction_loss, same_pose_loss, total_objective,
    verification_loss, weighted_objective, LossReport, LossWeights, ObjectiveTerms, Saturation,
};
use pose_distill::models::{Group, ModelConfig, Networks};
use pose_distill::pose::{render_pose_map, Keypoint, PoseLandmarks, NUM_JOINTS};
use pose_distill::train::{Checkpoint, NullSink, Stage, StageSchedule, TrainConfig, TrainSink, Trainer};
use pose_distill::Tensor;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

/// Largest relative error between the analytic gradient of `f` at `x` and
/// central differences.
fn gradient_error(x: &Tensor<f64>, f: &dyn for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>) -> f64 {
    const STEP: f64 = 1e-4;
    let value = |t: &Tensor<f64>| {
        let g = Graph::new();
        f(g.constant(t.clone())).value().data()[0]
    };
    let g = Graph::new();
    let v = g.variable(x.clone());
    let grads = g.backward(f(v));
    let analytic = grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += STEP;
        minus.data_mut()[i] -= STEP;
        let numeric = (value(&plus) - value(&minus)) / (2.0 * STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-10));
    }
    worst
}

fn sample(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn separated_pair(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    // rows [a; b] with |a - b| >= 0.01 everywhere
    let a = sample(shape, -1.0, 1.0, rng);
    let mut b = a.clone();
    for v in b.data_mut() {
        let d: f64 = rng.gen_range(0.01..0.5);
        *v += if rng.gen::<bool>() { d } else { -d };
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let mut s = shape.to_vec();
    s[0] *= 2;
    Tensor::from_vec(&s, data).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 6];
    for _ in 0..20 {
        let n = rng.gen_range(2..6);
        let same: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let eps = rng.gen_range(0.0..0.3);

        let d = sample(&[n], 0.05, 0.95, &mut rng);
        worst[0] = worst[0].max(gradient_error(&d, &|v| verification_loss(v, &same, &mut Saturation::default()).unwrap()));

        // two real branches (vector and patch map) and two fake ones
        let s = sample(&[4 * n, 1, 2, 3], 0.05, 0.95, &mut rng);
        worst[1] = worst[1].max(gradient_error(&s, &|v| {
            let b = |k: usize| v.slice_rows(k * n, (k + 1) * n);
            adversarial_discriminator_loss(&[b(0), b(1).mean_rows()], &[b(2), b(3)], eps, &mut Saturation::default()).unwrap()
        }));
        worst[2] = worst[2].max(gradient_error(&s, &|v| {
            adversarial_generator_loss(&[v.slice_rows(0, n), v.slice_rows(n, 3 * n).mean_rows()], &mut Saturation::default()).unwrap()
        }));

        let img = separated_pair(&[n, 3, 4, 2], &mut rng);
        worst[3] = worst[3].max(gradient_error(&img, &|v| reconstruction_loss(v.slice_rows(0, n), v.slice_rows(n, 2 * n)).unwrap()));
        let pos = vec![true; n];
        worst[4] = worst[4].max(gradient_error(&img, &|v| same_pose_loss(v.slice_rows(0, n), v.slice_rows(n, 2 * n), &pos).unwrap()));

        let w = LossWeights {
            lambda_id: rng.gen_range(0.0..1.0),
            lambda_pd: rng.gen_range(0.0..1.0),
            lambda_r: rng.gen_range(0.0..20.0),
            lambda_sp: rng.gen_range(0.0..2.0),
            label_smoothing: 0.0,
        };
        let parts = sample(&[5], 0.0, 3.0, &mut rng);
        worst[5] = worst[5].max(gradient_error(&parts, &|v| {
            let t = |k: usize| Some(v.slice_rows(k, k + 1).square().sum());
            weighted_objective(&ObjectiveTerms { v: t(0), id: t(1), pd: t(2), r: t(3), sp: t(4) }, &w).unwrap()
        }));
    }
    let names = ["L_v", "L_adv_D", "L_adv_G", "L_r", "L_sp", "objective"];
    let detail = names.iter().zip(worst).map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.iter().all(|&e| e < 1e-4), || format!("relative error >= 1e-4: {detail}"))?;
    Ok(format!("max relative error {detail}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let g = Graph::<f64>::new();
    let t = |v: &[f64]| g.constant(Tensor::from_vec(&[v.len()], v.to_vec()).unwrap());
    let sat = &mut Saturation::default();
    let value = |v: Var<'_, f64>| v.value().data()[0];

    let ap = {
        let d = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let gallery = Labels { identities: &[9, 4, 4], cameras: &[1, 1, 1] };
        let r = evaluate_distances(&d, Labels { identities: &[4], cameras: &[0] }, gallery, &Protocol::default()).unwrap();
        r.map
    };
    let landmark = {
        let mut pts = [Keypoint::HIDDEN; NUM_JOINTS];
        pts[0] = Keypoint::new(10.0, 10.0);
        let m = render_pose_map::<f64>(&PoseLandmarks::new(pts, 32, 32).unwrap(), 5.0, 32, 32).unwrap();
        m.at(0, 10, 15)
    };
    let smoothed_real = {
        let with = value(adversarial_discriminator_loss(&[t(&[0.9])], &[t(&[0.5])], 0.1, sat).unwrap());
        with - 2f64.ln()
    };
    let report = LossReport { l_v: 0.7, l_id_g: 0.6, l_pd_g: 0.6, l_r: 0.2, l_sp: 0.1, ..Default::default() };
    let ones = g.constant(Tensor::from_vec(&[2, 3, 2, 2], vec![1.0; 24]).unwrap());
    let cases = [
        ("BCE d=0.9 C=1", value(verification_loss(t(&[0.9]), &[true], sat).unwrap()), -(0.9f64.ln())),
        ("adversarial 0.5/0.5", value(adversarial_discriminator_loss(&[t(&[0.5])], &[t(&[0.5])], 0.0, sat).unwrap()), 2.0 * 2f64.ln()),
        ("smoothed real 0.9", smoothed_real, -0.9 * 0.9f64.ln()),
        ("generator D=0.5", value(adversarial_generator_loss(&[t(&[0.5])], sat).unwrap()), 2f64.ln()),
        ("reconstruction +1/-1", value(reconstruction_loss(ones, ones.neg()).unwrap()), 2.0),
        ("objective", total_objective(&report, &LossWeights::default()).unwrap(), 2.92),
        ("Gaussian at sigma", landmark, (-0.5f64).exp()),
        ("AP", ap, 7.0 / 12.0),
    ];
    let mut out = Vec::new();
    for (name, got, want) in cases {
        ensure((got - want).abs() < 1e-6, || format!("{name}: got {got}, want {want}"))?;
        out.push(format!("{name} {got:.5}"));
    }
    Ok(out.join(", "))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..200 {
        let nq = rng.gen_range(1..=50);
        let ng = rng.gen_range(1..=200);
        let ids = rng.gen_range(1..=12);
        // coarse distances so ties are common
        let levels = if case % 2 == 0 { 8 } else { 1000 };
        let d: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let dist = Tensor::from_vec(&[nq, ng], d).unwrap();
        let label = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<usize>, Vec<usize>) {
            ((0..n).map(|_| rng.gen_range(0..ids)).collect(), (0..n).map(|_| rng.gen_range(0..3)).collect())
        };
        let (qi, qc) = label(nq, &mut rng);
        let (gi, gc) = label(ng, &mut rng);
        let protocol = Protocol { junk_same_camera: rng.gen(), max_rank: rng.gen_range(1..=25) };
        let q = Labels { identities: &qi, cameras: &qc };
        let g = Labels { identities: &gi, cameras: &gc };
        let fast = evaluate_distances(&dist, q, g, &protocol).unwrap();
        let slow = reference_evaluate(&dist, q, g, &protocol).unwrap();
        ensure(fast == slow, || format!("instance {case} ({nq}x{ng}) differs: mAP {} vs {}", fast.map, slow.map))?;
    }
    Ok("200 instances identical".into())
}

// ---------------------------------------------------------------- 4

fn digests(t: &Trainer<f32>) -> Vec<(Group, [u8; 32])> {
    Group::ALL.iter().map(|&g| (g, t.state_digest(g))).collect()
}

fn changed(before: &[(Group, [u8; 32])], after: &[(Group, [u8; 32])]) -> Vec<Group> {
    before.iter().zip(after).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0).collect()
}

fn criterion_4() -> Outcome {
    let ds = generate_synthetic_dataset(&SynthSpec { n_identities: 4, images_per_identity: 6, ..Default::default() }).unwrap();
    // audit mode hashes groups around every half-step and errors on a stray update
    let cfg = TrainConfig { batch_pairs: 4, positive_pairs: 2, iters_per_epoch: 3, audit: true, ..TrainConfig::desk() };
    let w = LossWeights::default();
    let mut t = Trainer::<f32>::start(&ModelConfig::desk(), &TrainConfig { max_iterations: Some(1), ..cfg.clone() }, &w, &ds).unwrap();
    t.run(&ds, &mut NullSink).unwrap();

    let short = TrainConfig { max_iterations: Some(3), ..cfg.clone() };
    let mut t2 = Trainer::next_stage(&t.to_checkpoint(), Stage::II, &short, &w, &ds).unwrap();
    let before = digests(&t2);
    t2.run(&ds, &mut NullSink).map_err(|e| format!("stage II audit: {e}"))?;
    let moved = changed(&before, &digests(&t2));
    ensure(moved == [Group::G, Group::DId, Group::DPd], || format!("stage II changed {moved:?}"))?;

    let mut t3 = Trainer::next_stage(&t2.to_checkpoint(), Stage::III, &short, &w, &ds).unwrap();
    let norm = t3.encoder_norm_digest();
    let before = digests(&t3);
    t3.run(&ds, &mut NullSink).map_err(|e| format!("stage III audit: {e}"))?;
    ensure(t3.encoder_norm_digest() == norm, || "stage III moved encoder batch-norm state".into())?;
    let moved = changed(&before, &digests(&t3));
    ensure(moved.len() == Group::ALL.len(), || format!("stage III changed only {moved:?}"))?;
    Ok("stage II moves G, D_id, D_pd only; every half-step audited; stage III encoder norm state fixed".into())
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    // closed forms of the published schedule
    let step = |base: f64, e: f64| base * 0.1f64.powi(((e - 1.0) / 40.0).floor() as i32);
    let linear = |base: f64, e: f64, hold: f64, span: f64| base * (1.0 - ((e - hold) / span).max(0.0)).clamp(0.0, 1.0);
    let expected = |stage: Stage, group: Group, e: f64| -> f64 {
        match (stage, group) {
            (Stage::I, Group::E) => step(0.01, e),
            (Stage::I, Group::V) => step(0.1, e),
            (Stage::II, Group::G) => linear(1e-3, e, 50.0, 50.0),
            (Stage::II, Group::DId) => linear(1e-4, e, 50.0, 50.0),
            (Stage::II, Group::DPd) => linear(1e-2, e, 50.0, 50.0),
            (Stage::III, Group::E) => linear(1e-6, e, 25.0, 25.0),
            (Stage::III, Group::G) => linear(1e-6, e, 25.0, 25.0),
            (Stage::III, Group::V) => linear(1e-5, e, 25.0, 25.0),
            (Stage::III, Group::DId | Group::DPd) => linear(1e-4, e, 25.0, 25.0),
            _ => 0.0,
        }
    };
    // drive a trainer whose epochs are one iteration long on the full-scale schedule
    let ds = generate_synthetic_dataset(&SynthSpec { n_identities: 3, images_per_identity: 4, ..Default::default() }).unwrap();
    let cfg = TrainConfig { batch_pairs: 2, positive_pairs: 1, iters_per_epoch: 1, desk_factor: 1.0, audit: false, ..TrainConfig::desk() };
    let w = LossWeights::default();
    let mut t1 = Trainer::<f32>::start(&ModelConfig::desk(), &cfg, &w, &ds).unwrap();
    let epochs = [1u64, 40, 41, 50, 75, 80, 100];
    let mut checked = 0;
    let mut probe = |t: &mut Trainer<f32>| -> Result<(), String> {
        let stage = t.stage();
        let sampler = PairSampler::new(&ds, stage != Stage::I);
        let total = t.total_iterations();
        for &e in epochs.iter().filter(|&&e| e <= total) {
            t.iteration = e - 1;
            let rec = t.step(&ds, &sampler).map_err(|e| e.to_string())?;
            ensure(rec.epoch as u64 == e, || format!("stage {stage}: record epoch {} for {e}", rec.epoch))?;
            for &g in &Group::ALL {
                let want = expected(stage, g, e as f64);
                let got = rec.lr.get(&g).copied().unwrap_or(0.0);
                ensure((got - want).abs() <= 1e-12 * want.max(1e-300), || format!("stage {stage} {g:?} epoch {e}: {got} vs {want}"))?;
                // the schedule object agrees with the emitted value
                let s = StageSchedule::resolve(stage, &Default::default(), 1.0).unwrap();
                ensure(s.lr(g, e as usize) == got, || format!("stage {stage} {g:?} epoch {e}: schedule disagrees"))?;
                checked += 1;
            }
        }
        t.iteration = t.total_iterations();
        Ok(())
    };
    probe(&mut t1)?;
    let mut t2 = Trainer::next_stage(&t1.to_checkpoint(), Stage::II, &cfg, &w, &ds).unwrap();
    probe(&mut t2)?;
    let mut t3 = Trainer::next_stage(&t2.to_checkpoint(), Stage::III, &cfg, &w, &ds).unwrap();
    probe(&mut t3)?;
    Ok(format!("{checked} emitted rates match the closed form"))
}

// ---------------------------------------------------------------- 6

struct ProbeSink {
    batch: PairBatch<f32>,
    curve: Vec<f64>,
}

impl TrainSink<f32> for ProbeSink {
    fn on_epoch_end(&mut self, t: &mut Trainer<f32>, _: &Dataset) -> pose_distill::Result<()> {
        let p = t.probe_reconstruction(&self.batch)?;
        self.curve.push(p);
        Ok(())
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let ds = generate_synthetic_dataset(&SynthSpec::default()).unwrap();
    ensure(ds.identities().len() == 8, || "expected 8 identities".into())?;
    let cfg = TrainConfig::desk();
    let w = LossWeights::default();
    let mut t = Trainer::<f32>::start(&ModelConfig::desk(), &cfg, &w, &ds).map_err(|e| e.to_string())?;
    t.run(&ds, &mut NullSink).map_err(|e| e.to_string())?;
    let acc = t.pair_accuracy(&ds, 512, 128, 61).map_err(|e| e.to_string())?;

    let mut t2 = Trainer::next_stage(&t.to_checkpoint(), Stage::II, &cfg, &w, &ds).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let batch = sample_pair_batch(&ds, cfg.batch_pairs, cfg.positive_pairs, cfg.bandwidth, ModelConfig::desk().noise_dim, &mut rng)
        .map_err(|e| e.to_string())?;
    let p0 = t2.probe_reconstruction(&batch).map_err(|e| e.to_string())?;
    let mut sink = ProbeSink { batch, curve: vec![] };
    t2.run(&ds, &mut sink).map_err(|e| e.to_string())?;
    let ratio = sink.curve.last().unwrap() / p0;
    let early: Vec<f64> = std::iter::once(p0).chain(sink.curve.iter().copied()).take(11).collect();
    let violations = early.windows(2).filter(|w| w[1] >= w[0]).count();
    let elapsed = start.elapsed();

    let detail = format!(
        "stage I pair accuracy {:.3} after {} iterations; probe loss {p0:.4} -> {:.4} (ratio {ratio:.3}) over {} stage II iterations; \
         {violations} rises in the first 10 epochs; {:.0} s",
        acc,
        t.iteration,
        sink.curve.last().unwrap(),
        t2.iteration,
        elapsed.as_secs_f64()
    );
    ensure(acc >= 0.95 && ratio <= 0.5 && elapsed < Duration::from_secs(15 * 60) && violations <= 2, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn ablation_data() -> (Dataset, Dataset) {
    let train = generate_synthetic_dataset(&SynthSpec::default()).unwrap();
    let test = generate_synthetic_dataset(&SynthSpec { n_identities: 16, seed: 8, first_identity: 1000, query_gallery: true, ..Default::default() })
        .unwrap();
    (train, test)
}

fn held_out_map(nets: &mut Networks<f32>, test: &Dataset) -> f64 {
    let p = Protocol { junk_same_camera: false, max_rank: 20 };
    let q = extract_embeddings(nets, &test.split(Split::Query), true).unwrap();
    let g = extract_embeddings(nets, &test.split(Split::Gallery), true).unwrap();
    evaluate(&q, &g, &p).unwrap().map
}

fn median_iqr(v: &[f64]) -> (f64, f64) {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (s.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (x - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (train, test) = ablation_data();
    let mut maps: [Vec<f64>; 3] = Default::default();
    for seed in 1..=3u64 {
        let cfg = TrainConfig { seed, ..TrainConfig::desk() };
        // half-length epochs for the generative stages keep three seeds
        // of two variants inside the time budget; the stage-III encoder
        // rate is raised from 1e-6, which leaves a randomly initialized
        // desk encoder practically unchanged
        let mut late = TrainConfig { iters_per_epoch: 8, ..cfg.clone() };
        late.stage3.lr.insert("E".into(), 1e-4);
        let w = LossWeights::default();
        let mut t1 = Trainer::<f32>::start(&ModelConfig::desk(), &cfg, &w, &train).map_err(|e| e.to_string())?;
        t1.run(&train, &mut NullSink).map_err(|e| e.to_string())?;
        maps[2].push(held_out_map(&mut t1.nets, &test));
        let ck = t1.to_checkpoint();
        for (slot, sp) in [(0, w.lambda_sp), (1, 0.0)] {
            let w = LossWeights { lambda_sp: sp, ..w };
            let mut t2 = Trainer::next_stage(&ck, Stage::II, &late, &w, &train).map_err(|e| e.to_string())?;
            t2.run(&train, &mut NullSink).map_err(|e| e.to_string())?;
            let mut t3 = Trainer::next_stage(&t2.to_checkpoint(), Stage::III, &late, &w, &train).map_err(|e| e.to_string())?;
            t3.run(&train, &mut NullSink).map_err(|e| e.to_string())?;
            maps[slot].push(held_out_map(&mut t3.nets, &test));
        }
    }
    let elapsed = start.elapsed();
    let [(full, full_iqr), (no_sp, no_sp_iqr), (base, base_iqr)] = [0, 1, 2].map(|k| median_iqr(&maps[k]));
    let detail = format!(
        "median mAP full {full:.4} (IQR {full_iqr:.4}), no L_sp {no_sp:.4} (IQR {no_sp_iqr:.4}), baseline {base:.4} (IQR {base_iqr:.4}); \
         per seed {maps:.4?}; {:.0} s",
        elapsed.as_secs_f64()
    );
    let beats = |other: f64, other_iqr: f64| full - other > full_iqr.max(other_iqr);
    ensure(beats(no_sp, no_sp_iqr) && beats(base, base_iqr) && elapsed < Duration::from_secs(2 * 3600), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let ds = generate_synthetic_dataset(&SynthSpec { n_identities: 5, images_per_identity: 6, query_gallery: true, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_dataset(&ds, dir.path()).map_err(|e| e.to_string())?;
    let lm = dir.path().join("landmarks.csv");
    ensure(lm.is_file(), || "dataset export has no landmark file".into())?;
    std::fs::remove_file(&lm).map_err(|e| e.to_string())?;
    let bare = load_reid_root(dir.path(), 64, 32).map_err(|e| e.to_string())?;
    ensure(bare.samples.iter().all(|s| s.landmarks.is_none()), || "landmarks still present".into())?;
    ensure(bare.len() == ds.len(), || format!("reloaded {} of {} images", bare.len(), ds.len()))?;

    let mut nets = Networks::<f32>::new(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    for split in [Split::Query, Split::Gallery] {
        let with = extract_embeddings(&mut nets, &ds.split(split), true).map_err(|e| e.to_string())?;
        let without = extract_embeddings(&mut nets, &bare.split(split), true).map_err(|e| e.to_string())?;
        ensure(with.len() == without.len(), || format!("{split:?}: {} vs {} rows", with.len(), without.len()))?;
        for (i, name) in with.names.iter().enumerate() {
            let j = without.names.iter().position(|n| n == name).ok_or_else(|| format!("{name} missing after reload"))?;
            ensure(with.row(i) == without.row(j), || format!("{name}: embedding differs without landmarks"))?;
        }
    }
    Ok(format!("{} images embedded identically with the landmark file deleted", ds.len()))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let cfg = ModelConfig::desk();
    let mut nets = Networks::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut twin = Networks::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut diagonal = None;
    for _ in 0..10 {
        // 10 batches of 100 random embedding pairs
        let scale = rng.gen_range(0.1..10.0);
        let a = Tensor::randn(&[100, cfg.embed_dim], scale, &mut rng);
        let b = Tensor::randn(&[100, cfg.embed_dim], scale, &mut rng);
        let ab = nets.verify(&a, &b).unwrap();
        ensure(ab == nets.verify(&b, &a).unwrap(), || "verify(a, b) != verify(b, a)".into())?;
        ensure(ab.data().iter().all(|&p| p > 0.0 && p < 1.0), || "probability outside (0, 1)".into())?;
        ensure(ab == twin.verify(&a, &b).unwrap(), || "same seed, different head".into())?;
        let aa = nets.verify(&a, &a).unwrap();
        let d0 = *diagonal.get_or_insert(aa.data()[0]);
        ensure(aa.data().iter().all(|&p| p == d0), || "verify(a, a) not constant".into())?;
    }
    let x = Tensor::uniform(&[4, 3, 64, 32], -1.0, 1.0, &mut rng);
    ensure(nets.encode(&x).unwrap() == twin.encode(&x).unwrap(), || "encoder not deterministic".into())?;

    // resume: run 5 iterations, checkpoint after 3, replay 4 and 5
    let ds = generate_synthetic_dataset(&SynthSpec { n_identities: 4, images_per_identity: 6, ..Default::default() }).unwrap();
    let tc = TrainConfig { batch_pairs: 4, positive_pairs: 2, iters_per_epoch: 5, ..TrainConfig::desk() };
    let w = LossWeights::default();
    let mut s1 = Trainer::<f32>::start(&cfg, &TrainConfig { max_iterations: Some(1), ..tc.clone() }, &w, &ds).unwrap();
    s1.run(&ds, &mut NullSink).unwrap();
    let mut resumed = Vec::new();
    for stage in [Stage::I, Stage::II] {
        let mut t = match stage {
            Stage::I => Trainer::<f32>::start(&cfg, &tc, &w, &ds).unwrap(),
            _ => Trainer::next_stage(&s1.to_checkpoint(), stage, &tc, &w, &ds).unwrap(),
        };
        let sampler = PairSampler::new(&ds, stage != Stage::I);
        let step = |t: &mut Trainer<f32>| t.step(&ds, &sampler).unwrap().losses;
        for _ in 0..3 {
            step(&mut t);
        }
        let bytes = t.to_checkpoint().to_bytes().unwrap();
        let tail: Vec<_> = (0..2).map(|_| step(&mut t)).collect();
        let mut back = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), &ds).unwrap();
        let replay: Vec<_> = (0..2).map(|_| step(&mut back)).collect();
        for (a, b) in tail.iter().zip(&replay) {
            for ((name, u), (_, v)) in a.terms().iter().zip(b.terms()) {
                ensure(u.to_bits() == v.to_bits(), || format!("stage {stage} {name}: {u} vs {v} after resume"))?;
            }
        }
        resumed.push(stage.to_string());
    }
    Ok(format!("1000 verification pairs symmetric, diagonal constant; resume bit-exact in stages {}", resumed.join(", ")))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "loss gradients", criterion_1),
        (2, "loss oracles", criterion_2),
        (3, "metric reference", criterion_3),
        (4, "freeze audit", criterion_4),
        (5, "schedule", criterion_5),
        (6, "overfit micro-run", criterion_6),
        (7, "directional ablation", criterion_7),
        (8, "pose-free inference", criterion_8),
        (9, "symmetry and resume", criterion_9),
    ];
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {d}"),
            Err(d) => {
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {d}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
