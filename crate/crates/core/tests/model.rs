use std::sync::Arc;

use bimapper::autodiff::{ResampleTaps, Tape, Tensor, Var};
use bimapper::losses::{across_space_loss, LossConfig, TeacherMode};
use bimapper::model::{fuse, BiMapperModel, FrameInput, GvTransform, ModelConfig, Param, Stream};
use bimapper::synthworld::{generate_scene, render_frame, WorldConfig};
use bimapper::trainer::sample_loss;
use proptest::prelude::*;

fn setup(views: usize, seed: u64) -> (WorldConfig, ModelConfig, FrameInput) {
    let w = WorldConfig {
        n_views: views,
        ..WorldConfig::default()
    };
    let c = ModelConfig::for_world(&w);
    let f = render_frame(&generate_scene(seed, &w), &w).unwrap();
    let input = FrameInput::new(&f, &w, &c).unwrap();
    (w, c, input)
}

fn values(t: &Tape<f64>, v: Var) -> Vec<f64> {
    t.value(v).data().to_vec()
}

fn streams(model: &BiMapperModel, input: &FrameInput) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::<f64>::new();
    let p = model.bind(&mut t, false);
    let out = model.forward(&mut t, &p, input).unwrap();
    (values(&t, out.f_gv), values(&t, out.f_lv))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len()
        && a
            .iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Moves view `perm[i]` of `input` to slot `i`.
fn permute_input(input: &FrameInput, perm: &[usize]) -> FrameInput {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let taps = ResampleTaps {
        out_shape: input.taps.out_shape,
        taps: input
            .taps
            .taps
            .iter()
            .map(|cell| cell.iter().map(|&(v, i)| (inv[v as usize] as u16, i)).collect())
            .collect(),
    };
    FrameInput {
        images: perm.iter().map(|&p| input.images[p].clone()).collect(),
        ipm_images: perm.iter().map(|&p| input.ipm_images[p].clone()).collect(),
        camera_labels: perm.iter().map(|&p| input.camera_labels[p].clone()).collect(),
        taps: Arc::new(taps),
        ..input.clone()
    }
}

/// Gives slot `i` the per-view weights of view `perm[i]`.
fn permute_params(model: &BiMapperModel, perm: &[usize]) -> BiMapperModel {
    let find = |name: &str| model.params().iter().find(|p| p.name == name).unwrap().value.clone();
    let params: Vec<Param> = model
        .params()
        .iter()
        .map(|p| {
            let parts: Vec<&str> = p.name.splitn(3, '.').collect();
            let value = match parts.as_slice() {
                [head @ ("gv" | "encoder"), v, rest] if v.parse::<usize>().is_ok() => {
                    let src = perm[v.parse::<usize>().unwrap()];
                    find(&format!("{head}.{src}.{rest}"))
                }
                _ => p.value.clone(),
            };
            Param {
                name: p.name.clone(),
                value,
            }
        })
        .collect();
    BiMapperModel::from_params(*model.config(), params).unwrap()
}

#[test]
fn permuting_views_with_their_weights_leaves_streams_unchanged() {
    let (_, mut c, input) = setup(4, 3);
    for (shared, gv) in [(true, GvTransform::Spatial), (false, GvTransform::Spatial), (true, GvTransform::Flat)] {
        c.shared_encoder = shared;
        c.gv_transform = gv;
        let m = BiMapperModel::new(c, 9).unwrap();
        let perm = [2, 0, 3, 1];
        let (gv, lv) = streams(&m, &input);
        let (gv2, lv2) = streams(&permute_params(&m, &perm), &permute_input(&input, &perm));
        assert!(close(&gv, &gv2, 1e-12), "global stream changed");
        assert!(close(&lv, &lv2, 1e-12), "local stream changed");
    }
}

#[test]
fn identical_views_double_the_global_stream() {
    let (_, c1, one) = setup(1, 5);
    let c2 = ModelConfig { n_views: 2, ..c1 };
    let m1 = BiMapperModel::new(c1, 4).unwrap();
    // both views carry view 0's image and weights
    let params = BiMapperModel::new(c2, 0)
        .unwrap()
        .params()
        .iter()
        .map(|p| {
            let src = p.name.replace("gv.1.", "gv.0.");
            let value = m1.params().iter().find(|q| q.name == src).unwrap().value.clone();
            Param {
                name: p.name.clone(),
                value,
            }
        })
        .collect();
    let m2 = BiMapperModel::from_params(c2, params).unwrap();
    let two = FrameInput {
        images: vec![one.images[0].clone(); 2],
        ipm_images: vec![one.ipm_images[0].clone(); 2],
        camera_labels: vec![one.camera_labels[0].clone(); 2],
        ..one.clone()
    };
    let (g1, _) = streams(&m1, &one);
    let (g2, _) = streams(&m2, &two);
    let doubled: Vec<f64> = g1.iter().map(|x| 2.0 * x).collect();
    assert!(close(&g2, &doubled, 1e-12));
}

proptest! {
    #[test]
    fn fusion_is_linear(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        w in (-2.0f64..2.0, -2.0f64..2.0),
        k in -3.0f64..3.0,
    ) {
        let mut t = Tape::<f64>::new();
        let va = t.constant(Tensor::new(&[6], a.clone()).unwrap());
        let vb = t.constant(Tensor::new(&[6], b.clone()).unwrap());
        let f = fuse(&mut t, va, vb, w).unwrap();
        let ka = t.scale(va, k);
        let kb = t.scale(vb, k);
        let fk = fuse(&mut t, ka, kb, w).unwrap();
        for i in 0..6 {
            let want = w.0 * a[i] + w.1 * b[i];
            prop_assert!((t.value(f).data()[i] - want).abs() < 1e-12);
            prop_assert!((t.value(fk).data()[i] - k * want).abs() < 1e-11);
        }
    }
}

fn grad_norms(model: &BiMapperModel, input: &FrameInput, epoch: usize, cfg: &LossConfig) -> Vec<(String, f64)> {
    let mut t = Tape::<f64>::new();
    let p = model.bind(&mut t, true);
    let s = sample_loss(model, &mut t, &p, input, epoch, cfg).unwrap();
    let g = t.backward(s.total).unwrap();
    model
        .params()
        .iter()
        .zip(&p)
        .map(|(param, v)| (param.name.clone(), g.get(*v).map_or(0.0, |x| x.sum_squares().sqrt())))
        .collect()
}

#[test]
fn every_parameter_receives_gradient() {
    let (_, mut c, input) = setup(4, 1);
    for (shared, gv) in [(true, GvTransform::Spatial), (false, GvTransform::Spatial), (true, GvTransform::Flat)] {
        c.shared_encoder = shared;
        c.gv_transform = gv;
        let m = BiMapperModel::new(c, 2).unwrap();
        let cfg = LossConfig {
            teacher_mode: TeacherMode::Synchronous,
            ..LossConfig::default()
        };
        let dead: Vec<_> = grad_norms(&m, &input, 0, &cfg)
            .into_iter()
            .filter(|(_, n)| !(*n > 0.0))
            .collect();
        assert!(dead.is_empty(), "no gradient for {dead:?}");
    }
}

#[test]
fn across_space_loss_reaches_only_the_local_stream() {
    let (_, c, input) = setup(4, 2);
    let m = BiMapperModel::new(c, 3).unwrap();
    let mut t = Tape::<f64>::new();
    let p = m.bind(&mut t, true);
    let out = m.forward(&mut t, &p, &input).unwrap();
    let asl = across_space_loss(&mut t, &out.per_view_lv_logits, &input.camera_labels).unwrap();
    let g = t.backward(asl).unwrap();
    for (param, v) in m.params().iter().zip(&p) {
        let n = g.get(*v).map_or(0.0, |x| x.sum_squares());
        match param.stream() {
            Some(Stream::Local) if param.name.starts_with("lv.") => {
                assert!(n > 0.0, "{} gets no gradient", param.name)
            }
            _ => assert_eq!(n, 0.0, "{} should not be reached", param.name),
        }
    }
}

#[test]
fn view_count_mismatch_is_reported() {
    let (_, c, input) = setup(4, 0);
    let m = BiMapperModel::new(ModelConfig { n_views: 3, ..c }, 0).unwrap();
    let mut t = Tape::<f64>::new();
    let p = m.bind(&mut t, false);
    assert!(m.forward(&mut t, &p, &input).is_err());
}

#[test]
fn same_seed_same_weights() {
    let (_, c, _) = setup(2, 0);
    let a = BiMapperModel::new(c, 77).unwrap();
    let b = BiMapperModel::new(c, 77).unwrap();
    let d = BiMapperModel::new(c, 78).unwrap();
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.value.data() == y.value.data()));
    assert!(a.params().iter().zip(d.params()).any(|(x, y)| x.value.data() != y.value.data()));
}

#[test]
fn blank_images_and_zero_biases_give_zero_global_stream() {
    let (_, c, input) = setup(2, 0);
    let m = BiMapperModel::new(c, 1).unwrap();
    let params = m
        .params()
        .iter()
        .map(|p| Param {
            name: p.name.clone(),
            value: if p.name.ends_with(".bias") {
                Tensor::zeros(p.value.shape())
            } else {
                p.value.clone()
            },
        })
        .collect();
    let m = BiMapperModel::from_params(c, params).unwrap();
    let blank = FrameInput {
        images: input.images.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        ..input
    };
    let (gv, _) = streams(&m, &blank);
    assert!(gv.iter().all(|&x| x == 0.0));
}
