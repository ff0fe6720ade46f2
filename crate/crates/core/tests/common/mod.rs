//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::sync::Arc;

use bimapper::autodiff::{AutodiffError, ResampleTaps, Tape, Tensor, Var};
use bimapper::bevgrid::{SemanticGrid, VOID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>;

/// Worst relative disagreement between reverse-mode gradients and central
/// differences with step `h`: for each input, `|a - n| / max(|a|, |n|)` in
/// the Euclidean norm over its elements.
///
/// Inputs whose gradients are both below `1e-8` in norm count as agreeing.
pub fn gradcheck(build: &Build, inputs: &[Tensor<f64>], h: f64) -> Result<f64, AutodiffError> {
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
        let l = build(&mut t, &vars)?;
        Ok(t.item(l))
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.param(v.clone())).collect();
    let loss = build(&mut t, &vars)?;
    let grads = t.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(*v).map_or(0.0, |g| g.data()[j]);
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        let scale = na.max(nn).sqrt();
        if scale > 1e-8 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(worst)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

pub fn random_probs(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

/// A random gather from `n_in` `[C, h, w]` inputs onto an `[C, h, w]` grid.
pub fn random_taps(rng: &mut impl Rng, n_in: usize, h: usize, w: usize) -> Arc<ResampleTaps> {
    let taps = (0..h * w)
        .map(|_| {
            let k = rng.random_range(0..=2);
            (0..k)
                .map(|_| (rng.random_range(0..n_in) as u16, rng.random_range(0..(h * w) as u32)))
                .collect()
        })
        .collect();
    Arc::new(ResampleTaps {
        out_shape: (h, w),
        taps,
    })
}

/// Every single op exercised on small random inputs: `(name, build, inputs)`.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Box<Build>, Vec<Tensor<f64>>)> {
    let mut r = rng(seed);
    let mut cases: Vec<(&'static str, Box<Build>, Vec<Tensor<f64>>)> = Vec::new();
    let chw = [2, 3, 4];

    cases.push((
        "matmul",
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &[3, 4], 0.0), random_tensor(&mut r, &[4, 2], 0.0)],
    ));
    for (name, f) in [
        ("add", Tape::<f64>::add as fn(&mut Tape<f64>, Var, Var) -> Result<Var, AutodiffError>),
        ("sub", Tape::<f64>::sub),
        ("mul", Tape::<f64>::mul),
    ] {
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = f(t, v[0], v[1])?;
                let y = t.mul(y, v[1])?;
                Ok(t.sum(y))
            }),
            vec![random_tensor(&mut r, &chw, 0.0), random_tensor(&mut r, &chw, 0.0)],
        ));
    }
    cases.push((
        "scale",
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        }),
        vec![random_tensor(&mut r, &chw, 0.0)],
    ));
    cases.push((
        "relu",
        Box::new(|t, v| {
            let y = t.relu(v[0]);
            let y = t.mul(y, v[1])?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &chw, 0.05), random_tensor(&mut r, &chw, 0.0)],
    ));
    cases.push((
        "sigmoid",
        Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            let y = t.mul(y, v[1])?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &chw, 0.0), random_tensor(&mut r, &chw, 0.0)],
    ));
    cases.push((
        "softmax_channel",
        Box::new(|t, v| {
            let y = t.softmax_channel(v[0])?;
            let y = t.mul(y, v[1])?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &[3, 2, 2], 0.0), random_tensor(&mut r, &[3, 2, 2], 0.0)],
    ));
    for (name, k, stride) in [("conv2d k3 s1", 3, 1), ("conv2d k3 s2", 3, 2), ("conv2d k1 s1", 1, 1)] {
        cases.push((
            name,
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            }),
            vec![
                random_tensor(&mut r, &[2, 5, 4], 0.0),
                random_tensor(&mut r, &[3, 2, k, k], 0.0),
                random_tensor(&mut r, &[3], 0.0),
            ],
        ));
    }
    cases.push((
        "conv_transpose2x",
        Box::new(|t, v| {
            let y = t.conv_transpose2x(v[0], v[1], v[2])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        }),
        vec![
            random_tensor(&mut r, &[2, 2, 3], 0.0),
            random_tensor(&mut r, &[2, 3, 2, 2], 0.0),
            random_tensor(&mut r, &[3], 0.0),
        ],
    ));
    cases.push((
        "reshape",
        Box::new(|t, v| {
            let y = t.reshape(v[0], &[6, 4])?;
            let y = t.matmul(y, v[1])?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &chw, 0.0), random_tensor(&mut r, &[4, 1], 0.0)],
    ));
    cases.push((
        "sum",
        Box::new(|t, v| {
            let s = t.sum(v[0]);
            Ok(t.mul(s, s)?)
        }),
        vec![random_tensor(&mut r, &chw, 0.0)],
    ));
    cases.push((
        "mean",
        Box::new(|t, v| {
            let s = t.mean(v[0]);
            Ok(t.mul(s, s)?)
        }),
        vec![random_tensor(&mut r, &chw, 0.0)],
    ));
    cases.push((
        "threshold",
        Box::new(|t, v| {
            let s = t.threshold(v[0], 0.0);
            let y = t.mul(s, v[1])?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &chw, 0.05), random_tensor(&mut r, &chw, 0.0)],
    ));
    let taps = random_taps(&mut r, 2, 3, 4);
    cases.push((
        "resample",
        Box::new(move |t, v| {
            let y = t.resample(&[v[0], v[1]], taps.clone())?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        }),
        vec![random_tensor(&mut r, &chw, 0.0), random_tensor(&mut r, &chw, 0.0)],
    ));
    let target = Tensor::from_fn(&chw, |_| f64::from(u8::from(r.random_bool(0.5))));
    let mask: Arc<Vec<bool>> = Arc::new((0..24).map(|_| r.random_bool(0.8)).collect());
    cases.push((
        "bce",
        Box::new(move |t, v| {
            let y = t.constant(target.clone());
            t.bce(v[0], y, Some(mask.clone()))
        }),
        vec![random_probs(&mut r, &chw)],
    ));
    let labels: Arc<Vec<u8>> = Arc::new(
        (0..12)
            .map(|_| if r.random_bool(0.2) { VOID } else { r.random_range(0..2) })
            .collect(),
    );
    cases.push((
        "cross_entropy",
        Box::new(move |t, v| t.cross_entropy(v[0], labels.clone(), VOID)),
        vec![random_tensor(&mut r, &chw, 0.0)],
    ));
    cases.push((
        "binary_kl",
        Box::new(|t, v| t.binary_kl(v[0], v[1])),
        vec![random_probs(&mut r, &chw), random_probs(&mut r, &chw)],
    ));
    cases.push((
        "mse",
        Box::new(|t, v| t.mse(v[0], v[1])),
        vec![random_tensor(&mut r, &chw, 0.0), random_tensor(&mut r, &chw, 0.0)],
    ));
    cases
}

/// A random chain of 1 to 6 shape-preserving ops on a `[2, 3, 4]` input
/// followed by a scalar reduction or loss.
pub fn random_composition(seed: u64) -> (Box<Build>, Vec<Tensor<f64>>) {
    let mut r = rng(seed);
    let chw = [2usize, 3, 4];
    let depth = r.random_range(1..=6);
    let ops: Vec<u32> = (0..depth).map(|_| r.random_range(0..9)).collect();
    let reducer = r.random_range(0..5u32);
    let mut inputs = vec![random_tensor(&mut r, &chw, 0.1)];
    // one auxiliary parameter per op, used by the binary ones
    for _ in 0..depth {
        inputs.push(random_tensor(&mut r, &chw, 0.1));
    }
    let kernel = inputs.len();
    inputs.push(random_tensor(&mut r, &[2, 2, 3, 3], 0.0).map(|x| 0.5 * x));
    inputs.push(random_tensor(&mut r, &[2], 0.0));
    let taps = random_taps(&mut r, 1, 3, 4);
    let target = Tensor::from_fn(&chw, |_| f64::from(u8::from(r.random_bool(0.5))));
    let labels: Arc<Vec<u8>> = Arc::new((0..12).map(|_| r.random_range(0..2)).collect());
    let teacher = random_probs(&mut r, &chw);

    let build = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var, AutodiffError> {
        let mut x = v[0];
        for (i, op) in ops.iter().enumerate() {
            let aux = v[1 + i];
            x = match op {
                0 => t.add(x, aux)?,
                1 => t.sub(x, aux)?,
                2 => t.mul(x, aux)?,
                3 => t.scale(x, 0.7),
                4 => {
                    // offset keeps relu inputs off the kink for these seeds
                    let y = t.add(x, aux)?;
                    t.relu(y)
                }
                5 => t.sigmoid(x),
                6 => t.softmax_channel(x)?,
                7 => t.conv2d(x, v[kernel], v[kernel + 1], 1)?,
                _ => {
                    let y = t.resample(&[x], taps.clone())?;
                    t.add(y, aux)?
                }
            };
        }
        match reducer {
            0 => Ok(t.sum(x)),
            1 => {
                let y = t.mul(x, x)?;
                Ok(t.mean(y))
            }
            2 => {
                let p = t.sigmoid(x);
                let y = t.constant(target.clone());
                t.bce(p, y, None)
            }
            3 => t.cross_entropy(x, labels.clone(), VOID),
            _ => {
                let p = t.sigmoid(x);
                let q = t.constant(teacher.clone());
                t.binary_kl(q, p)
            }
        }
    };
    (Box::new(build), inputs)
}

/// Brute-force IoU: `None` when the class is absent from both grids.
pub fn iou_oracle(pred: &SemanticGrid, gt: &SemanticGrid, class: u8) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for row in 0..gt.height() {
        for col in 0..gt.width() {
            let g = gt.get(col, row);
            if g == VOID {
                continue;
            }
            let (a, b) = (pred.get(col, row) == class, g == class);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Brute-force directed mean nearest-neighbour distance in cell units.
pub fn directed_oracle(from: &[(i64, i64)], to: &[(i64, i64)]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|&(r0, c0)| {
            to.iter()
                .map(|&(r1, c1)| (((r0 - r1).pow(2) + (c0 - c1).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

pub fn random_grid(rng: &mut impl Rng, w: usize, h: usize, classes: u8, void_p: f64) -> SemanticGrid {
    let mut g = SemanticGrid::filled(w, h, 0);
    for row in 0..h {
        for col in 0..w {
            let v = if rng.random_bool(void_p) {
                VOID
            } else {
                rng.random_range(0..=classes)
            };
            g.set(col, row, v);
        }
    }
    g
}

/// Worst round-trip error over `n` random points, as a multiple of the
/// tolerance `1e-12 + 1e-9 * |x|`; at most 1 means every check passed.
/// Covers camera to pixel and back at known depth, ego to camera and back
/// under random rigid transforms, and pixel to ground plane and back.
pub fn geometry_roundtrip_worst(n: usize, seed: u64) -> f64 {
    use bimapper::geometry::{
        cam_to_ego, cam_to_pixel, ego_to_cam, pixel_to_cam_on_plane, CamPoint, CameraExtrinsics,
        CameraIntrinsics, EgoPoint, IpmSpec, PixelCoord,
    };
    use nalgebra::{Rotation3, Vector3};

    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| {
        worst = worst.max((got - want).abs() / (1e-12 + 1e-9 * want.abs()));
    };
    for _ in 0..n {
        let k = CameraIntrinsics::new(
            r.random_range(20.0..800.0),
            r.random_range(20.0..800.0),
            r.random_range(0.0..320.0),
            r.random_range(0.0..240.0),
            640,
            480,
        )
        .expect("valid intrinsics");
        let p = CamPoint::new(
            r.random_range(-20.0..20.0),
            r.random_range(-5.0..5.0),
            r.random_range(0.1..60.0),
        );
        let px = cam_to_pixel(p, &k).expect("positive depth");
        let back = [
            (px.u - k.cx) * p.z / k.fx,
            (px.v - k.cy) * p.z / k.fy,
        ];
        check(back[0], p.x);
        check(back[1], p.y);

        let rot = Rotation3::from_euler_angles(
            r.random_range(-3.1..3.1),
            r.random_range(-1.5..1.5),
            r.random_range(-3.1..3.1),
        );
        let t = Vector3::new(
            r.random_range(-5.0..5.0),
            r.random_range(-5.0..5.0),
            r.random_range(-5.0..5.0),
        );
        let e = CameraExtrinsics::new(*rot.matrix(), t).expect("rotation is orthonormal");
        let q = EgoPoint::new(
            r.random_range(-30.0..30.0),
            r.random_range(-3.0..3.0),
            r.random_range(-30.0..30.0),
        );
        let q2 = cam_to_ego(ego_to_cam(q, &e), &e);
        check(q2.x, q.x);
        check(q2.y, q.y);
        check(q2.z, q.z);

        let spec = IpmSpec {
            plane_height: r.random_range(0.5..3.0),
            ..IpmSpec::default()
        };
        let px = PixelCoord::new(
            r.random_range(0.0..640.0),
            r.random_range(k.cy + 1.0..k.cy + 480.0),
        );
        let g = pixel_to_cam_on_plane(px, &k, &spec).expect("below horizon");
        check(g.y, spec.plane_height);
        let px2 = cam_to_pixel(g, &k).expect("in front");
        check(px2.u, px.u);
        check(px2.v, px.v);
    }
    worst
}

/// Largest deviation of library IoU and Chamfer values from the brute-force
/// oracles over `n` random 16x16 grid pairs with three classes.
pub fn metrics_oracle_worst(n: usize, seed: u64) -> f64 {
    use bimapper::metrics::{chamfer, class_points, iou, Chamfer};

    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let gt = random_grid(&mut r, 16, 16, 3, 0.1);
        let pred = random_grid(&mut r, 16, 16, 3, 0.0);
        for class in 1..=3u8 {
            let got = iou(&pred, &gt, class).expect("same shape");
            let want = iou_oracle(&pred, &gt, class).unwrap_or(1.0);
            worst = worst.max((got - want).abs());

            let p = class_points(&pred, &gt, class);
            let g = class_points(&gt, &gt, class);
            match chamfer(&p, &g, 0.5) {
                Chamfer::Distances(d) => {
                    let cp = 0.5 * directed_oracle(&p, &g);
                    let cl = 0.5 * directed_oracle(&g, &p);
                    let cd = (p.len() as f64 * cp + g.len() as f64 * cl) / (p.len() + g.len()) as f64;
                    worst = worst.max((d.cd_p - cp).abs()).max((d.cd_l - cl).abs()).max((d.cd - cd).abs());
                }
                Chamfer::EmptyPointSet if p.is_empty() || g.is_empty() => {}
                Chamfer::EmptyPointSet => return f64::INFINITY,
            }
        }
    }
    worst
}

/// Whether Chamfer distances are bit-identical after shifting both point sets
/// by random offsets, over `n` random trials.
pub fn chamfer_translation_invariant(n: usize, seed: u64) -> bool {
    use bimapper::metrics::chamfer;

    let mut r = rng(seed);
    fn points(r: &mut impl Rng) -> Vec<(i64, i64)> {
        let k = r.random_range(1..=20);
        (0..k).map(|_| (r.random_range(0..16), r.random_range(0..16))).collect()
    }
    (0..n).all(|_| {
        let (a, b) = (points(&mut r), points(&mut r));
        let (dx, dy) = (r.random_range(-500..500), r.random_range(-500..500));
        let shift = |v: &[(i64, i64)]| v.iter().map(|&(x, y)| (x + dx, y + dy)).collect::<Vec<_>>();
        chamfer(&a, &b, 0.5) == chamfer(&shift(&a), &shift(&b), 0.5)
    })
}
