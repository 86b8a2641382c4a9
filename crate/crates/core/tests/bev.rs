use nightocc::bev::{bev_pool, bev_pool_with_mass, residual_query, AttentionParams, BevFeature, DepthContext};
use nightocc::geometry::{project_point, sample_heights, BevSpec, CameraMatrix};
use nightocc::Tensor3;
use proptest::prelude::*;

fn identity_camera() -> CameraMatrix {
    CameraMatrix::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()
}

/// Camera at the origin looking along +x, z up.
fn forward_camera(focal: f64, w: f64, h: f64) -> CameraMatrix {
    CameraMatrix::from_row_slice(&[
        w / 2.0,
        -focal,
        0.0,
        0.0, //
        h / 2.0,
        0.0,
        -focal,
        0.0, //
        1.0,
        0.0,
        0.0,
        0.0,
    ])
    .unwrap()
}

/// Zero-padded bilinear lookup written out longhand.
fn bilinear(t: &Tensor3, c: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| {
        if xi < 0.0 || yi < 0.0 || xi >= t.width() as f64 || yi >= t.height() as f64 {
            0.0
        } else {
            t.get(c, yi as usize, xi as usize)
        }
    };
    px(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + px(x0 + 1.0, y0) * fx * (1.0 - fy)
        + px(x0, y0 + 1.0) * (1.0 - fx) * fy
        + px(x0 + 1.0, y0 + 1.0) * fx * fy
}

#[test]
fn single_pixel_single_bin_lands_in_hand_computed_cell() {
    // pixel centre (0.5, 0.5) at depth 2 back-projects to (1, 1, 2) → cell (12, 12) of the desk grid
    let f_ctx = Tensor3::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
    let depth = Tensor3::new(1, 1, 1, vec![1.0]).unwrap();
    let dc = DepthContext::new(f_ctx, depth, vec![2.0]).unwrap();
    let q = bev_pool(&dc, &identity_camera(), &BevSpec::desk()).unwrap();
    for i in 0..20 {
        for j in 0..20 {
            let expected = if (i, j) == (12, 12) { vec![1.0, 2.0, 3.0] } else { vec![0.0; 3] };
            assert_eq!(q.cell(i, j), expected, "cell ({i}, {j})");
        }
    }
}

#[test]
fn zero_context_pools_to_zero() {
    let f_ctx = Tensor3::zeros(2, 6, 8);
    let depth = Tensor3::filled(4, 6, 8, 0.25);
    let dc = DepthContext::new(f_ctx, depth, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let q = bev_pool(&dc, &forward_camera(4.0, 8.0, 6.0), &BevSpec::desk()).unwrap();
    assert!(q.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn pooling_is_linear_in_context() {
    let f_ctx = Tensor3::from_fn(2, 6, 8, |c, y, x| (c + 2 * y + 3 * x) as f64 * 0.125).unwrap();
    let depth = Tensor3::filled(4, 6, 8, 0.25);
    let scaled = f_ctx.map(|v| 4.0 * v).unwrap();
    let cam = forward_camera(4.0, 8.0, 6.0);
    let bins = vec![1.0, 2.0, 3.0, 4.0];
    let q = bev_pool(&DepthContext::new(f_ctx, depth.clone(), bins.clone()).unwrap(), &cam, &BevSpec::desk()).unwrap();
    let q4 = bev_pool(&DepthContext::new(scaled, depth, bins).unwrap(), &cam, &BevSpec::desk()).unwrap();
    for (a, b) in q.tensor().data().iter().zip(q4.tensor().data()) {
        assert_eq!(4.0 * a, *b);
    }
}

#[test]
fn uniform_attention_sums_context_at_projections() {
    let spec = BevSpec::desk();
    let (h, w, c) = (6usize, 8usize, 2usize);
    let cam = forward_camera(4.0, w as f64, h as f64);
    let f_ctx = Tensor3::from_fn(c, h, w, |ch, y, x| 1.0 + ch as f64 + 0.5 * y as f64 - 0.25 * x as f64).unwrap();
    let q = BevFeature::new(Tensor3::from_fn(c, 20, 20, |ch, i, j| (ch + i + j) as f64 * 0.01).unwrap());
    let params = AttentionParams::zeros(4, c).unwrap();
    let n_z = 8;
    let out = residual_query(&q, &f_ctx, &cam, &spec, n_z, &params).unwrap();
    let heights = sample_heights(&spec, n_z).unwrap();
    let mut hits = 0;
    for i in 0..20 {
        for j in 0..20 {
            let (x, y) = spec.cell_center(i, j);
            let mut expected = vec![0.0; c];
            for &z in &heights {
                let p = project_point(&cam, x, y, z);
                if p.valid && p.u >= 0.0 && p.u < w as f64 && p.v >= 0.0 && p.v < h as f64 {
                    hits += 1;
                    for (ch, e) in expected.iter_mut().enumerate() {
                        // four equally weighted points at the same place
                        *e += 4.0 * 0.25 * bilinear(&f_ctx, ch, p.u - 0.5, p.v - 0.5);
                    }
                }
            }
            for (a, e) in out.cell(i, j).iter().zip(&expected) {
                assert!((a - e).abs() <= 1e-12, "cell ({i}, {j}): {a} vs {e}");
            }
        }
    }
    assert!(hits > 0, "no height sample projected into the image");
}

#[test]
fn references_behind_camera_contribute_nothing() {
    // every point of the grid has depth z - 10 < 0
    let cam = CameraMatrix::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -10.0]).unwrap();
    let f_ctx = Tensor3::filled(2, 4, 4, 1.0);
    let q = BevFeature::new(Tensor3::filled(2, 20, 20, 0.3));
    let params = AttentionParams::seeded(4, 2, 0.5, 9).unwrap();
    let out = residual_query(&q, &f_ctx, &cam, &BevSpec::desk(), 8, &params).unwrap();
    assert!(out.tensor().data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scattered_mass_never_exceeds_total(seed in 0u64..1000, h in 1usize..6, w in 1usize..6) {
        let bins = 3;
        let raw = Tensor3::from_fn(bins, h, w, |b, y, x| ((seed as usize + 7 * b + 3 * y + x) % 5 + 1) as f64).unwrap();
        let depth = Tensor3::from_fn(bins, h, w, |b, y, x| {
            let s: f64 = (0..bins).map(|k| raw.get(k, y, x)).sum();
            raw.get(b, y, x) / s
        })
        .unwrap();
        let dc = DepthContext::new(Tensor3::filled(1, h, w, 1.0), depth, vec![1.0, 3.0, 6.0]).unwrap();
        let out = bev_pool_with_mass(&dc, &forward_camera(2.0, w as f64, h as f64), &BevSpec::desk()).unwrap();
        prop_assert!(out.scattered_mass <= (h * w) as f64 + 1e-9);
        // with a unit context the pooled feature is the mass grid
        prop_assert_eq!(out.q.tensor().data(), out.mass.data());
    }
}
