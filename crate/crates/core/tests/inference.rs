mod common;

use clade::image::Image2D;
use clade::inference::*;
use clade::net::{Generator, GeneratorSpec};
use clade::tensor::{save_checkpoint, Checkpoint, Tensor};
use clade::volume::{extract_slices, resample_to_isotropic, Plane, Volume3D};
use clade::Error;
use rand::Rng;

fn random_volume(dims: [usize; 3], spacing: [f64; 3], seed: u64) -> Volume3D {
    let mut rng = common::rng(seed);
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Volume3D::new(dims, spacing, data).unwrap()
}

const FULL_WINDOW: (f64, f64) = (0.0, 100.0);

#[test]
fn identity_mapper_reproduces_interpolated_input() {
    let v = random_volume([40, 36, 12], [1.0, 1.0, 3.0], 1);
    let iso = resample_to_isotropic(&v).unwrap();
    for stride in [8, 12, 32] {
        let opts = InferenceOptions {
            stride,
            percentiles: FULL_WINDOW,
        };
        let out = super_resolve_volume(&v, &IdentityMapper, &opts).unwrap();
        assert_eq!(out.dims(), iso.dims());
        assert_eq!(out.spacing(), iso.spacing());
        let err = out
            .data()
            .iter()
            .zip(iso.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "stride {stride}: {err}");
    }
}

#[test]
fn identity_output_does_not_depend_on_stride() {
    let v = random_volume([33, 48, 10], [0.8, 0.8, 4.0], 2);
    let run = |stride| {
        super_resolve_volume(
            &v,
            &IdentityMapper,
            &InferenceOptions {
                stride,
                percentiles: DEFAULT_PERCENTILES,
            },
        )
        .unwrap()
    };
    let a = run(32);
    let b = run(8);
    let err = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn constant_mapper_gives_constant_volume() {
    let v = random_volume([32, 40, 10], [1.0, 1.0, 4.0], 3);
    let out = super_resolve_volume(
        &v,
        &ConstantMapper(0.0),
        &InferenceOptions {
            stride: 12,
            percentiles: FULL_WINDOW,
        },
    )
    .unwrap();
    let (lo, hi) = out.intensity_range();
    let mid = 0.5 * (lo + hi);
    assert!(out.data().iter().all(|x| (x - mid).abs() < 1e-12));
}

#[test]
fn generator_changes_the_secondary_plane_too() {
    let v = random_volume([32, 36, 10], [1.0, 1.0, 4.0], 4);
    let g = Generator::<f64>::new(GeneratorSpec::with_base_channels(2, true), 5).unwrap();
    let opts = InferenceOptions {
        stride: 16,
        percentiles: FULL_WINDOW,
    };
    let out = super_resolve_volume(&v, &g, &opts).unwrap();
    let iso = resample_to_isotropic(&v).unwrap();
    assert_eq!(out.dims(), iso.dims());
    let a = extract_slices(&out, Plane::LrSecondary);
    let b = extract_slices(&iso, Plane::LrSecondary);
    for (s, t) in a.iter().zip(&b) {
        assert!(s.max_abs_diff(t) > 1e-6);
    }
}

#[test]
fn batching_does_not_change_generator_outputs() {
    let g = Generator::<f64>::new(GeneratorSpec::with_base_channels(2, true), 9).unwrap();
    let mut rng = common::rng(10);
    let patches: Vec<Image2D> = (0..INFER_BATCH + 5)
        .map(|_| Image2D::from_fn(32, 32, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let batched = g.map_patches(&patches).unwrap();
    for (p, b) in patches.iter().zip(&batched) {
        let single = g.map_patches(std::slice::from_ref(p)).unwrap();
        assert!(single[0].max_abs_diff(b) < 1e-12);
    }
}

#[test]
fn slices_smaller_than_a_patch_are_rejected() {
    let v = random_volume([40, 20, 10], [1.0, 1.0, 4.0], 6);
    let err = super_resolve_volume(&v, &IdentityMapper, &InferenceOptions::default());
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
    let bad_stride = InferenceOptions {
        stride: 33,
        percentiles: DEFAULT_PERCENTILES,
    };
    let v = random_volume([32, 40, 10], [1.0, 1.0, 4.0], 6);
    assert!(super_resolve_volume(&v, &IdentityMapper, &bad_stride).is_err());
}

#[test]
fn patch_count_is_non_increasing_in_stride() {
    let v = random_volume([64, 70, 16], [1.0, 1.0, 4.0], 7);
    assert!(patches_per_slice(&v, 6).unwrap() > patches_per_slice(&v, 12).unwrap());
    let counts: Vec<usize> = (1..=32).map(|s| patches_per_slice(&v, s).unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    // 64 x 70 slices of the primary plane: rows along axis 1 (70), columns
    // along the resampled axis 2 (64).
    assert_eq!(patches_per_slice(&v, 32).unwrap(), 3 * 2);
}

#[test]
fn stride_sweep_reports_every_stride() {
    let v = random_volume([32, 48, 12], [1.0, 1.0, 4.0], 8);
    let rows = stride_sweep(&v, &IdentityMapper, &[8, 16, 32], 2, DEFAULT_PERCENTILES).unwrap();
    assert_eq!(rows.iter().map(|r| r.stride).collect::<Vec<_>>(), [8, 16, 32]);
    assert!(rows.iter().all(|r| r.seconds_mean > 0.0 && r.score_mean.is_finite()));
    assert!(rows[0].patches_per_slice > rows[2].patches_per_slice);
    let mut buf = Vec::new();
    write_stride_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "stride,score_mean,score_std,seconds_mean,seconds_std,patches_per_slice"
    );
    assert_eq!(text.lines().count(), 4);
    assert!(stride_sweep(&v, &IdentityMapper, &[], 1, DEFAULT_PERCENTILES).is_err());
}

#[test]
fn generator_checkpoints_round_trip_and_check_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let g = Generator::<f32>::new(GeneratorSpec::with_base_channels(2, false), 11).unwrap();
    let path = dir.path().join("g.ckpt");
    save_generator(&g, &path).unwrap();
    let back = load_generator::<f32>(&path).unwrap();
    assert_eq!(back, g);

    // Shape mismatch between stored tensors and the recorded architecture.
    let mut ckpt = generator_checkpoint(&g, "").unwrap();
    ckpt.tensors[0].1 = Tensor::zeros(&[1, 1, 1, 1]);
    let bad = dir.path().join("bad.ckpt");
    save_checkpoint(&ckpt, &bad).unwrap();
    assert!(matches!(load_generator::<f32>(&bad), Err(Error::Format { .. })));

    let bare: Checkpoint<f32> = Checkpoint {
        tensors: vec![],
        metadata: serde_json::json!({}),
    };
    let none = dir.path().join("none.ckpt");
    save_checkpoint(&bare, &none).unwrap();
    assert!(matches!(load_generator::<f32>(&none), Err(Error::Format { .. })));
}
