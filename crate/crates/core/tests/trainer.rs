mod common;

use std::path::Path;

use clade::image::Image2D;
use clade::inference::{ConstantMapper, IdentityMapper, PatchMapper};
use clade::losses::{GmapForm, LossWeights};
use clade::net::generator_forward;
use clade::patchwork::{PatchGrid, PatchSet};
use clade::tensor::{OpKind, Tape, Tensor};
use clade::trainer::*;
use clade::volume::{generate_phantom, random_phantom_spec, PhantomSpec, Primitive, Volume3D};
use clade::Error;
use rand::Rng;

fn tiny_config() -> TrainingConfig {
    TrainingConfig {
        epochs: 2,
        batch_size: 2,
        base_channels: 4,
        disc_base_channels: 4,
        n_residual_blocks: 1,
        steps_per_epoch: Some(3),
        ..TrainingConfig::default()
    }
}

fn one_primitive_lr() -> Volume3D {
    let spec = PhantomSpec {
        seed: 3,
        dims: [40, 40, 40],
        spacing: [1.0, 1.0, 4.0],
        primitives: vec![Primitive::Ellipsoid {
            center: [20.0, 20.0, 20.0],
            radii: [12.0, 9.0, 14.0],
            intensity: 0.8,
        }],
        noise_std: 0.02,
        edge_blur_mm: 0.5,
    };
    generate_phantom(&spec).unwrap().lr
}

fn small_corpus() -> (PatchSet, PatchSet) {
    prepare_corpus(&[one_primitive_lr()], 1, 7, (0.5, 99.5)).unwrap()
}

fn eval_volume() -> Volume3D {
    generate_phantom(&random_phantom_spec(50, [32, 32, 32], [1.0, 1.0, 4.0]))
        .unwrap()
        .lr
}

fn batch(set: &PatchSet, idx: &[usize]) -> Vec<Tensor<f32>> {
    let all = patch_tensors(set).unwrap();
    idx.iter().map(|&i| all[i].clone()).collect()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn zero_weights_and_silent_discriminators_leave_log2_per_term() {
    let mut cfg = tiny_config();
    cfg.weights = LossWeights::new(0.0, 0.0, 0.0).unwrap();
    let mut state = TrainingRunState::new(cfg).unwrap();
    for d in [&mut state.d_x, &mut state.d_y] {
        for name in ["out.weight", "out.bias"] {
            d.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let (x, y) = small_corpus();
    let b = generator_step(&mut state, &batch(&x, &[0, 1]), &batch(&y, &[0, 1])).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((b.adv_forward - ln2).abs() < 1e-6, "{b:?}");
    assert!((b.adv_backward - ln2).abs() < 1e-6, "{b:?}");
    assert_eq!(b.ident, 0.0);
    assert!((b.total - 2.0 * ln2).abs() < 1e-6);
}

#[test]
fn discriminator_and_generator_phases_touch_only_their_networks() {
    let mut state = TrainingRunState::new(tiny_config()).unwrap();
    let (x, y) = small_corpus();
    let (xs, ys) = (batch(&x, &[0, 1]), batch(&y, &[2, 3]));

    let before = state.clone();
    discriminator_step(&mut state, &xs, &ys).unwrap();
    assert_eq!(state.g_x, before.g_x);
    assert_eq!(state.g_y, before.g_y);
    assert_ne!(state.d_x, before.d_x);
    assert_ne!(state.d_y, before.d_y);
    assert_eq!(state.adam[0], before.adam[0]);
    assert_eq!(state.adam[1], before.adam[1]);

    let mid = state.clone();
    generator_step(&mut state, &xs, &ys).unwrap();
    assert_eq!(state.d_x, mid.d_x);
    assert_eq!(state.d_y, mid.d_y);
    assert_ne!(state.g_x, mid.g_x);
    assert_ne!(state.g_y, mid.g_y);
    assert_eq!(state.adam[2], mid.adam[2]);
    assert_eq!(state.adam[3], mid.adam[3]);
}

#[test]
fn non_finite_values_name_their_source_and_step() {
    let mut state = TrainingRunState::new(tiny_config()).unwrap();
    state.step = 17;
    state.g_x.tensors[0].data_mut()[0] = f32::NAN;
    let (x, y) = small_corpus();
    let err = generator_step(&mut state, &batch(&x, &[0]), &batch(&y, &[0])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite { .. }), "{msg}");
    assert!(msg.contains("step 17"), "{msg}");
    assert!(msg.contains("generator"), "{msg}");
}

#[test]
fn cycle_loss_halves_within_200_steps_on_a_single_primitive() {
    let cfg = TrainingConfig {
        batch_size: 4,
        base_channels: 4,
        disc_base_channels: 4,
        n_residual_blocks: 2,
        ..TrainingConfig::default()
    };
    let mut state = TrainingRunState::new(cfg).unwrap();
    let (x, y) = prepare_corpus(&[one_primitive_lr()], 4, 1, (0.5, 99.5)).unwrap();
    let xt = patch_tensors(&x).unwrap();
    let yt = patch_tensors(&y).unwrap();
    let mut rng = common::rng(11);
    let mut cyc = Vec::new();
    for _ in 0..200 {
        let xs: Vec<_> = (0..4).map(|_| xt[rng.gen_range(0..xt.len())].clone()).collect();
        let ys: Vec<_> = (0..4).map(|_| yt[rng.gen_range(0..yt.len())].clone()).collect();
        cyc.push(train_step(&mut state, &xs, &ys).unwrap().cyc);
    }
    let early = cyc[..10].iter().sum::<f64>() / 10.0;
    let late = cyc[190..].iter().sum::<f64>() / 10.0;
    assert!(late <= 0.5 * early, "cyc moving average {early} -> {late}");
}

#[test]
fn identical_runs_write_identical_bytes() {
    let (x, y) = small_corpus();
    let eval = EvalSet {
        volume: Some(eval_volume()),
        probes: x.patches[..16].to_vec(),
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_training(&tiny_config(), &x, &y, &eval, d.path()).unwrap();
    }
    for name in [
        "losses.csv",
        "eval.csv",
        "generator.ckpt",
        "checkpoints/epoch_001.ckpt",
        "checkpoints/epoch_002.ckpt",
    ] {
        assert_eq!(read(&dirs[0].path().join(name)), read(&dirs[1].path().join(name)), "{name}");
    }
}

#[test]
fn one_epoch_gives_one_checkpoint_and_one_eval_row() {
    let (x, y) = small_corpus();
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let eval = EvalSet {
        volume: Some(eval_volume()),
        probes: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&cfg, &x, &y, &eval, dir.path()).unwrap();
    let ckpts: Vec<_> = std::fs::read_dir(checkpoint_dir(dir.path())).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(out.state.evals.len(), 1);
    assert_eq!(out.selected_epoch, Some(1));
    assert_eq!(out.state.evals[0].collapse_ratio, None);
    let eval_csv = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(eval_csv.lines().count(), 2);
    assert_eq!(eval_csv.lines().next().unwrap(), EVAL_CSV_HEADER.join(","));
    let losses = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 3);
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["variant"], "clade");
    assert_eq!(manifest["code_version"], CODE_VERSION);
    assert!(dir.path().join("generator.ckpt").exists());
}

#[test]
fn selection_is_the_argmin_epoch() {
    assert_eq!(select_epoch(&[33.7, 44.1, 23.3]), Some(3));
    assert_eq!(select_epoch(&[5.0, 5.0, 6.0]), Some(1));
    assert_eq!(select_epoch(&[f64::NAN, 2.0]), Some(2));
    assert_eq!(select_epoch(&[]), None);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let (x, y) = small_corpus();
    let eval = EvalSet {
        volume: Some(eval_volume()),
        probes: vec![],
    };
    let full = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.checkpoint_every = 2;
    let reference = run_training(&cfg, &x, &y, &eval, full.path()).unwrap().state;

    // From the end of epoch 1.
    let part = tempfile::tempdir().unwrap();
    let resumed = resume_training(
        &epoch_checkpoint_path(full.path(), 1),
        &x,
        &y,
        &eval,
        part.path(),
    )
    .unwrap()
    .state;
    assert_eq!(resumed, reference);
    assert_eq!(
        read(&part.path().join("losses.csv")),
        read(&full.path().join("losses.csv"))
    );

    // From the middle of epoch 1 (step 2 of 3).
    let mid = tempfile::tempdir().unwrap();
    let step_ckpt = checkpoint_dir(full.path()).join("step_00000002.ckpt");
    let resumed = resume_training(&step_ckpt, &x, &y, &eval, mid.path()).unwrap().state;
    assert_eq!(resumed.losses, reference.losses);
    assert_eq!(resumed, reference);

    // Checkpoint states compare equal after a round trip.
    let loaded = TrainingRunState::load(&epoch_checkpoint_path(full.path(), 2)).unwrap();
    assert_eq!(loaded, reference);
    assert_eq!(
        latest_checkpoint(full.path()).unwrap().unwrap(),
        epoch_checkpoint_path(full.path(), 2)
    );
}

#[test]
fn ablation_config_is_the_conventional_cycle_gan() {
    let mut cfg = TrainingConfig::default();
    assert_eq!(cfg.variant(), "clade");
    cfg.weights.lambda_gmap = 0.0;
    assert_eq!(cfg.variant(), "clade_no_gmap");
    cfg.demodulation = false;
    assert_eq!(cfg.variant(), "conventional_cyclegan");
    cfg.weights.lambda_gmap = 5.0;
    assert_eq!(cfg.variant(), "instance_norm_gmap");

    for (demodulation, norm_nodes) in [(false, true), (true, false)] {
        let cfg = TrainingConfig {
            demodulation,
            ..tiny_config()
        };
        let state = TrainingRunState::new(cfg.clone()).unwrap();
        let tape = Tape::new();
        let p = state.g_x.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        generator_forward(&cfg.generator_spec(), &p, x).unwrap();
        assert_eq!(tape.count_ops(OpKind::InstanceNorm) > 0, norm_nodes);
        assert_eq!(tape.count_ops(OpKind::Demodulate) > 0, demodulation);
    }
}

#[test]
fn config_files_fill_defaults_and_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    std::fs::write(&p, r#"{"epochs": 3, "gmap_form": "literal"}"#).unwrap();
    let cfg = TrainingConfig::load(&p).unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.gmap_form, GmapForm::Literal);
    assert_eq!(cfg.batch_size, 4);
    assert_eq!(cfg.lr, 2e-4);
    assert_eq!(cfg.beta1, 0.5);
    assert_eq!(cfg.weights, LossWeights::default());
    assert_eq!(cfg.eval_stride, 12);

    for bad in [
        r#"{"epochs": 0}"#,
        r#"{"batch_size": 0}"#,
        r#"{"lr": 0.0}"#,
        r#"{"weights": {"lambda_cyc": -1, "lambda_ident": 1, "lambda_gmap": 5}}"#,
    ] {
        std::fs::write(&p, bad).unwrap();
        assert!(matches!(TrainingConfig::load(&p), Err(Error::InvalidArgument(_))), "{bad}");
    }
    std::fs::write(&p, "{ not json").unwrap();
    assert!(matches!(TrainingConfig::load(&p), Err(Error::Format { .. })));
}

#[test]
fn literal_gradient_mapping_trains_too() {
    let cfg = TrainingConfig {
        gmap_form: GmapForm::Literal,
        ..tiny_config()
    };
    let mut state = TrainingRunState::new(cfg).unwrap();
    let (x, y) = small_corpus();
    let b = train_step(&mut state, &batch(&x, &[0, 1]), &batch(&y, &[0, 1])).unwrap();
    assert!(b.gmap > 0.0 && b.total.is_finite());
    assert_eq!(state.step, 1);
    assert_eq!(state.losses.len(), 1);
}

#[test]
fn corpus_counts_follow_eligible_slices() {
    let lr = one_primitive_lr();
    let (x, y) = prepare_corpus(&[lr.clone(), lr], 3, 0, (0.5, 99.5)).unwrap();
    // Resampled to 40^3: every slice of every plane is 40x40.
    assert_eq!(x.len(), 2 * 40 * 3);
    assert_eq!(y.len(), 2 * 40 * 3);
    let (x2, _) = prepare_corpus(&[one_primitive_lr(), one_primitive_lr()], 3, 0, (0.5, 99.5)).unwrap();
    assert_eq!(x, x2);
    assert!(x.patches.iter().all(|p| p.data().iter().all(|v| (-1.0..=1.0).contains(v))));
}

#[test]
fn seeds_streams_differ() {
    let a: Vec<u64> = (0..8).map(|s| derive_seed(0, s)).collect();
    let mut b = a.clone();
    b.sort_unstable();
    b.dedup();
    assert_eq!(b.len(), a.len());
    assert_ne!(derive_seed(1, 0), derive_seed(0, 0));
}

#[test]
fn sweep_writes_one_row_per_combination() {
    let (x, y) = small_corpus();
    let eval = EvalSet {
        volume: Some(eval_volume()),
        probes: vec![],
    };
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    cfg.steps_per_epoch = Some(1);
    let dir = tempfile::tempdir().unwrap();
    let rows = run_sweep(&cfg, &[1.0], &[0.0, 1.0], &[5.0], &x, &y, &eval, dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[1].lambda_cyc, rows[1].lambda_ident, rows[1].lambda_gmap), (1.0, 1.0, 5.0));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "lambda_cyc,lambda_ident,lambda_gmap,score_mean,score_std"
    );
    assert_eq!(text.lines().count(), 3);
    let no_eval = EvalSet::default();
    assert!(run_sweep(&cfg, &[1.0], &[1.0], &[1.0], &x, &y, &no_eval, dir.path()).is_err());
}

fn random_patches(n: usize, seed: u64) -> Vec<Image2D> {
    let mut rng = common::rng(seed);
    (0..n)
        .map(|_| Image2D::from_fn(32, 32, |_, _| rng.gen_range(-1.0..1.0)))
        .collect()
}

struct Cube;

impl PatchMapper for Cube {
    fn map_patches(&self, patches: &[Image2D]) -> clade::Result<Vec<Image2D>> {
        Ok(patches.iter().map(|p| p.map(|v| v * v * v)).collect())
    }
}

fn brute_pairwise(images: &[Image2D]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..images.len() {
        for j in 0..images.len() {
            if i < j {
                let mut s = 0.0;
                for r in 0..32 {
                    for c in 0..32 {
                        s += (images[i].get(r, c) - images[j].get(r, c)).abs();
                    }
                }
                total += s / 1024.0;
                pairs += 1.0;
            }
        }
    }
    total / pairs
}

#[test]
fn mode_collapse_flags_constants_and_spares_identity() {
    let probes = random_patches(MIN_PROBES, 1);
    let c = detect_mode_collapse(&ConstantMapper(0.3), &probes).unwrap();
    assert!(c.collapsed);
    assert_eq!(c.output_distance, 0.0);
    let id = detect_mode_collapse(&IdentityMapper, &probes).unwrap();
    assert!(!id.collapsed);
    assert!((id.ratio - 1.0).abs() < 1e-12);

    let probes = random_patches(20, 2);
    let r = detect_mode_collapse(&Cube, &probes).unwrap();
    let outputs = Cube.map_patches(&probes).unwrap();
    let expect = brute_pairwise(&outputs) / brute_pairwise(&probes);
    assert!((r.ratio - expect).abs() < 1e-7);

    assert!(detect_mode_collapse(&IdentityMapper, &probes[..15]).is_err());
    let same = vec![probes[0].clone(); MIN_PROBES];
    assert!(detect_mode_collapse(&IdentityMapper, &same).is_err());
}

fn brute_block_score(img: &Image2D, grid: &PatchGrid) -> f64 {
    let (h, w) = (img.rows(), img.cols());
    let axis = |len: usize, lines: usize, at: &dyn Fn(usize, usize) -> f64, starts: Vec<usize>| {
        let is_boundary = |c: usize| starts.iter().any(|&o| (c == o && o > 0) || c == o + 31);
        let (mut b, mut nb, mut o, mut no) = (0.0, 0.0, 0.0, 0.0);
        for c in 1..len - 1 {
            let mut s = 0.0;
            for l in 0..lines {
                s += (at(l, c - 1) - 2.0 * at(l, c) + at(l, c + 1)).abs();
            }
            s /= lines as f64;
            if is_boundary(c) {
                b += s;
                nb += 1.0;
            } else {
                o += s;
                no += 1.0;
            }
        }
        if nb == 0.0 || no == 0.0 {
            0.0
        } else {
            b / nb - o / no
        }
    };
    let cols = axis(w, h, &|r, c| img.get(r, c), grid.origins().iter().map(|o| o.1).collect());
    let rows = axis(h, w, &|c, r| img.get(r, c), grid.origins().iter().map(|o| o.0).collect());
    0.5 * (cols + rows)
}

#[test]
fn block_artifact_score_separates_ramps_from_seams() {
    let grid = PatchGrid::new(96, 96, 32).unwrap();
    let ramp = Image2D::from_fn(96, 96, |r, c| 0.01 * r as f64 + 0.004 * c as f64);
    assert!(detect_block_artifacts(&ramp, &grid).unwrap().abs() < 1e-6);

    let seams = Image2D::from_fn(96, 96, |_, c| 0.3 * (c / 32) as f64);
    assert!(detect_block_artifacts(&seams, &grid).unwrap() > 0.0);

    for (seed, (h, w, stride)) in [(60, 70, 12), (32, 45, 7), (96, 64, 32), (33, 33, 1)]
        .into_iter()
        .enumerate()
    {
        let mut rng = common::rng(seed as u64);
        let img = Image2D::from_fn(h, w, |_, _| rng.gen_range(0.0..1.0));
        let grid = PatchGrid::new(h, w, stride).unwrap();
        let got = detect_block_artifacts(&img, &grid).unwrap();
        assert!((got - brute_block_score(&img, &grid)).abs() < 1e-9, "{h}x{w}/{stride}");
    }

    let other = PatchGrid::new(64, 64, 32).unwrap();
    assert!(detect_block_artifacts(&ramp, &other).is_err());
}

#[test]
fn batches_must_pair_up() {
    let mut state = TrainingRunState::new(tiny_config()).unwrap();
    let (x, y) = small_corpus();
    assert!(train_step(&mut state, &batch(&x, &[0, 1]), &batch(&y, &[0])).is_err());
    assert!(train_step(&mut state, &[], &[]).is_err());
    let empty = PatchSet::empty(x.domain);
    let dir = tempfile::tempdir().unwrap();
    assert!(run_training(&tiny_config(), &empty, &y, &EvalSet::default(), dir.path()).is_err());
}
