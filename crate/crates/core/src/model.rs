//! Dual-stream BEV mapper.
//!
//! The global stream encodes each camera image and maps the flattened feature
//! map straight into the ego grid with a per-view two-layer MLP, summing over
//! views. The local stream warps each image onto the ground plane, segments
//! it in the camera frame, and resamples the class logits into the ego grid
//! through the calibration, averaging where views overlap. A weighted sum of
//! the two feeds a small convolutional decoder with one sigmoid output per
//! class.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ResampleTaps, Scalar, Tape, Tensor, Var};
use crate::bevgrid::{SemanticGrid, BACKGROUND, VOID};
use crate::geometry::{ipm_warp, GeometryError};
use crate::synthworld::{ego_taps, Frame, WorldConfig};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("expected {expected} views, got {got}")]
    ViewCountMismatch { expected: usize, got: usize },
    #[error("checkpoint architecture does not match: {0}")]
    ArchMismatch(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// How the global stream's MLP maps an encoder map to the ego grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GvTransform {
    /// One MLP over the whole flattened `(channels, rows, cols)` map.
    Flat,
    /// One MLP over the flattened `(rows, cols)` plane, shared by all
    /// channels, followed by a channel projection.
    Spatial,
}

/// Architecture hyperparameters. Stored verbatim in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_views: usize,
    /// Camera image `(rows, cols)`.
    pub image_size: (usize, usize),
    /// Ground-plane warp `(rows, cols)`; rows run along depth.
    pub ipm_size: (usize, usize),
    /// Ego grid `(rows, cols)`; rows run along z.
    pub grid_size: (usize, usize),
    /// Foreground classes; inputs and features carry one more (background).
    pub classes: usize,
    pub encoder_channels: [usize; 3],
    /// Stride of each encoder convolution.
    pub encoder_strides: [usize; 3],
    /// One encoder for all views instead of one per view.
    pub shared_encoder: bool,
    pub gv_hidden: usize,
    pub gv_transform: GvTransform,
    pub segnet_channels: (usize, usize),
    pub decoder_channels: usize,
    /// `(w_gv, w_lv)` weights of the stream sum.
    pub fusion: (f64, f64),
}

impl ModelConfig {
    pub fn for_world(w: &WorldConfig) -> Self {
        Self {
            n_views: w.n_views,
            image_size: (w.intrinsics.height, w.intrinsics.width),
            ipm_size: (w.ipm.out_height, w.ipm.out_width),
            grid_size: (w.grid.nz(), w.grid.nx()),
            classes: 3,
            encoder_channels: [8, 16, 16],
            encoder_strides: [2, 2, 2],
            shared_encoder: true,
            gv_hidden: 64,
            gv_transform: GvTransform::Spatial,
            segnet_channels: (8, 16),
            decoder_channels: 8,
            fusion: (1.0, 0.1),
        }
    }

    /// Channels of one-hot inputs and of both streams' feature grids.
    pub fn feat_channels(&self) -> usize {
        self.classes + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_views == 0 || self.classes == 0 {
            return bad("views and classes must be positive".into());
        }
        if self.encoder_strides.contains(&0) {
            return bad("encoder stride must be positive".into());
        }
        let (r, c) = self.ipm_size;
        if r == 0 || c == 0 || r % 4 != 0 || c % 4 != 0 {
            return bad(format!("ipm size {r}x{c} must be positive multiples of 4"));
        }
        if self.encoder_out().iter().any(|&d| d == 0) {
            return bad("encoder output is empty".into());
        }
        Ok(())
    }

    /// `(channels, rows, cols)` of the encoder output.
    pub fn encoder_out(&self) -> [usize; 3] {
        let (mut h, mut w) = self.image_size;
        for s in self.encoder_strides {
            h = h.saturating_sub(1) / s + usize::from(h > 0);
            w = w.saturating_sub(1) / s + usize::from(w > 0);
        }
        [self.encoder_channels[2], h, w]
    }

    fn grid_len(&self) -> usize {
        self.grid_size.0 * self.grid_size.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Global,
    Local,
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

impl Param {
    /// Stream a parameter belongs to; the decoder belongs to neither.
    pub fn stream(&self) -> Option<Stream> {
        let head = self.name.split('.').next().unwrap_or("");
        match head {
            "encoder" | "gv" | "fg_gv" => Some(Stream::Global),
            "lv" | "fg_lv" => Some(Stream::Local),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct GvLayers {
    fc1: Layer,
    fc2: Layer,
    /// Channel projection of the spatial transform.
    mix: Option<Layer>,
}

#[derive(Debug, Clone)]
struct Layout {
    encoders: Vec<[Layer; 3]>,
    gv: Vec<GvLayers>,
    seg: [Layer; 6],
    fg_gv: Layer,
    fg_lv: Layer,
    dec: [Layer; 3],
}

enum Init {
    /// Zero-mean normal with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Const(f32),
    /// Background-versus-foreground contrast over the feature channels.
    Contrast,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push((name, shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, gain: f64) -> Layer {
        Layer {
            w: self.add(
                format!("{name}.weight"),
                &[c_out, c_in, k, k],
                Init::Normal {
                    fan_in: c_in * k * k,
                    gain,
                },
            ),
            b: self.add(format!("{name}.bias"), &[c_out], Init::Const(0.0)),
        }
    }

    fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize) -> Layer {
        Layer {
            w: self.add(
                format!("{name}.weight"),
                &[c_in, c_out, 2, 2],
                Init::Normal {
                    fan_in: c_in,
                    gain: 2f64.sqrt(),
                },
            ),
            b: self.add(format!("{name}.bias"), &[c_out], Init::Const(0.0)),
        }
    }

    fn linear(&mut self, name: &str, n_in: usize, n_out: usize, gain: f64) -> Layer {
        Layer {
            w: self.add(
                format!("{name}.weight"),
                &[n_out, n_in],
                Init::Normal { fan_in: n_in, gain },
            ),
            b: self.add(format!("{name}.bias"), &[n_out, 1], Init::Const(0.0)),
        }
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let relu_gain = 2f64.sqrt();
    let c = cfg.feat_channels();
    let mut b = Builder { specs: Vec::new() };
    let n_enc = if cfg.shared_encoder { 1 } else { cfg.n_views };
    let [e1, e2, e3] = cfg.encoder_channels;
    let encoders = (0..n_enc)
        .map(|v| {
            let p = if cfg.shared_encoder {
                "encoder".to_string()
            } else {
                format!("encoder.{v}")
            };
            [
                b.conv(&format!("{p}.conv1"), c, e1, 3, relu_gain),
                b.conv(&format!("{p}.conv2"), e1, e2, 3, relu_gain),
                b.conv(&format!("{p}.conv3"), e2, e3, 3, relu_gain),
            ]
        })
        .collect();
    let flat: usize = cfg.encoder_out().iter().product();
    let cells = cfg.grid_len();
    let gv = (0..cfg.n_views)
        .map(|v| match cfg.gv_transform {
            GvTransform::Flat => GvLayers {
                fc1: b.linear(&format!("gv.{v}.fc1"), flat, cfg.gv_hidden, relu_gain),
                fc2: b.linear(&format!("gv.{v}.fc2"), cfg.gv_hidden, c * cells, 0.01),
                mix: None,
            },
            GvTransform::Spatial => {
                let [ch, eh, ew] = cfg.encoder_out();
                let p = eh * ew;
                let h = cfg.gv_hidden;
                let mut lin = |name: String, shape_w: [usize; 2], shape_b: [usize; 2], fan_in, gain| Layer {
                    w: b.add(format!("{name}.weight"), &shape_w, Init::Normal { fan_in, gain }),
                    b: b.add(format!("{name}.bias"), &shape_b, Init::Const(0.0)),
                };
                GvLayers {
                    fc1: lin(format!("gv.{v}.fc1"), [p, h], [1, h], p, relu_gain),
                    fc2: lin(format!("gv.{v}.fc2"), [h, cells], [1, cells], h, 1.0),
                    mix: Some(lin(format!("gv.{v}.mix"), [c, ch], [c, 1], ch, 0.01)),
                }
            }
        })
        .collect();
    let (s1, s2) = cfg.segnet_channels;
    let seg = [
        b.conv("lv.down0", c, s1, 3, relu_gain),
        b.conv("lv.down1", s1, s2, 3, relu_gain),
        b.conv("lv.down2", s2, s2, 3, relu_gain),
        b.conv_t("lv.up1", s2, s2),
        b.conv_t("lv.up0", s2, s1),
        b.conv("lv.head", s1, c, 3, 1.0),
    ];
    let head = |b: &mut Builder, name: &str| Layer {
        w: b.add(format!("{name}.weight"), &[1, c, 1, 1], Init::Contrast),
        b: b.add(format!("{name}.bias"), &[1], Init::Const(0.0)),
    };
    let fg_gv = head(&mut b, "fg_gv");
    let fg_lv = head(&mut b, "fg_lv");
    let d = cfg.decoder_channels;
    let dec = [
        b.conv("decoder.conv1", c, d, 3, relu_gain),
        b.conv("decoder.conv2", d, d, 3, relu_gain),
        b.conv("decoder.head", d, cfg.classes, 1, 1.0),
    ];
    // start with low foreground probability; most cells are background
    b.specs[dec[2].b].2 = Init::Const(-2.0);
    (
        b.specs,
        Layout {
            encoders,
            gv,
            seg,
            fg_gv,
            fg_lv,
            dec,
        },
    )
}

/// Precomputed, non-differentiable inputs for one frame.
#[derive(Debug, Clone)]
pub struct FrameInput {
    /// One-hot camera images, `[C, rows, cols]` per view.
    pub images: Vec<Tensor<f32>>,
    /// One-hot ground-plane warps, `[C, ipm rows, ipm cols]` per view.
    pub ipm_images: Vec<Tensor<f32>>,
    /// Camera-frame labels per view, row-major.
    pub camera_labels: Vec<Arc<Vec<u8>>>,
    /// Ego-grid gather table for the local stream.
    pub taps: Arc<ResampleTaps>,
    /// Per-class binary targets, `[classes, cells]`.
    pub targets: Tensor<f32>,
    /// Per-class validity of `targets` (false on VOID cells).
    pub target_mask: Arc<Vec<bool>>,
    pub ego_gt: SemanticGrid,
}

/// One-hot encoding of a class raster; VOID cells are all-zero.
pub fn one_hot(grid: &SemanticGrid, channels: usize) -> Tensor<f32> {
    let n = grid.data().len();
    let mut t = Tensor::zeros(&[channels, grid.height(), grid.width()]);
    for (i, &c) in grid.data().iter().enumerate() {
        if (c as usize) < channels {
            t.data_mut()[c as usize * n + i] = 1.0;
        }
    }
    t
}

impl FrameInput {
    pub fn new(frame: &Frame, world: &WorldConfig, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let taps = ego_taps(&world.grid, &frame.rig, &world.ipm);
        Self::with_taps(frame, world, cfg, Arc::new(ResampleTaps {
            out_shape: cfg.grid_size,
            taps,
        }))
    }

    /// Like [`FrameInput::new`] with a gather table shared across frames that
    /// use the same rig.
    pub fn with_taps(
        frame: &Frame,
        world: &WorldConfig,
        cfg: &ModelConfig,
        taps: Arc<ResampleTaps>,
    ) -> Result<Self, ModelError> {
        if frame.images.len() != cfg.n_views {
            return Err(ModelError::ViewCountMismatch {
                expected: cfg.n_views,
                got: frame.images.len(),
            });
        }
        let c = cfg.feat_channels();
        let images = frame.images.iter().map(|g| one_hot(g, c)).collect();
        let ipm_images = frame
            .images
            .iter()
            .zip(&frame.rig.views)
            .map(|(img, v)| Ok(one_hot(&ipm_warp(img, &v.intrinsics, &world.ipm)?, c)))
            .collect::<Result<Vec<_>, GeometryError>>()?;
        let camera_labels = frame
            .camera_gt
            .iter()
            .map(|g| Arc::new(g.data().to_vec()))
            .collect();
        let cells = frame.ego_gt.data();
        let n = cells.len();
        let mut targets = Tensor::zeros(&[cfg.classes, n]);
        let mut mask = vec![false; cfg.classes * n];
        for k in 0..cfg.classes {
            for (i, &g) in cells.iter().enumerate() {
                if g != VOID {
                    mask[k * n + i] = true;
                    targets.data_mut()[k * n + i] = f32::from(g as usize == k + 1);
                }
            }
        }
        Ok(Self {
            images,
            ipm_images,
            camera_labels,
            taps,
            targets,
            target_mask: Arc::new(mask),
            ego_gt: frame.ego_gt.clone(),
        })
    }
}

/// Everything one forward pass produces, as tape handles.
#[derive(Debug, Clone)]
pub struct StreamOutputs {
    pub f_gv: Var,
    pub f_lv: Var,
    pub per_view_lv_logits: Vec<Var>,
    pub fg_gv: Var,
    pub fg_lv: Var,
    pub fused: Var,
    /// Per-class probabilities, `[classes, rows, cols]`.
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct BiMapperModel {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl BiMapperModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feat_channels();
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Normal { fan_in, gain } => {
                        let d = Normal::new(0.0, gain / (fan_in as f64).sqrt())
                            .expect("finite standard deviation");
                        Tensor::from_fn(&shape, |_| d.sample(&mut rng) as f32)
                    }
                    Init::Const(v) => Tensor::full(&shape, v),
                    Init::Contrast => Tensor::from_fn(&shape, |i| {
                        if i == 0 {
                            -1.0
                        } else {
                            1.0 / (c - 1) as f32
                        }
                    }),
                };
                Param { name, value }
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self, ModelError> {
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len() {
            return Err(ModelError::ArchMismatch(format!(
                "expected {} parameters, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (a, b) in fresh.params.iter().zip(&params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(ModelError::ArchMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape, as trainable leaves or constants.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let t = p.value.cast::<T>();
                if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    fn conv<T: Scalar>(
        tape: &mut Tape<T>,
        p: &[Var],
        l: Layer,
        x: Var,
        stride: usize,
        relu: bool,
    ) -> Result<Var, ModelError> {
        let y = tape.conv2d(x, p[l.w], p[l.b], stride)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    /// Encoder feature map of one view's one-hot image.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        view: usize,
        image: Var,
    ) -> Result<Var, ModelError> {
        let enc = &self.layout.encoders[if self.config.shared_encoder { 0 } else { view }];
        let mut x = image;
        for (l, &s) in enc.iter().zip(&self.config.encoder_strides) {
            x = Self::conv(tape, p, *l, x, s, true)?;
        }
        Ok(x)
    }

    /// Global stream: per view encode, map the encoder output through a
    /// two-layer MLP with ReLU onto the ego grid; summed over views.
    pub fn gv_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        images: &[Var],
    ) -> Result<Var, ModelError> {
        self.check_views(images.len())?;
        let (rows, cols) = self.config.grid_size;
        let c = self.config.feat_channels();
        let mut total: Option<Var> = None;
        for (v, &img) in images.iter().enumerate() {
            let feat = self.encode(tape, p, v, img)?;
            let GvLayers { fc1, fc2, mix } = self.layout.gv[v];
            let y = match mix {
                None => {
                    let n = tape.value(feat).len();
                    let x = tape.reshape(feat, &[n, 1])?;
                    let h = tape.matmul(p[fc1.w], x)?;
                    let h = tape.add(h, p[fc1.b])?;
                    let h = tape.relu(h);
                    let y = tape.matmul(p[fc2.w], h)?;
                    tape.add(y, p[fc2.b])?
                }
                Some(mix) => {
                    // rows are channels, so both layers act on every
                    // channel's spatial plane with the same weights
                    let [ch, eh, ew] = self.config.encoder_out();
                    let x = tape.reshape(feat, &[ch, eh * ew])?;
                    let ones = tape.constant(Tensor::full(&[ch, 1], T::one()));
                    let h = tape.matmul(x, p[fc1.w])?;
                    let b1 = tape.matmul(ones, p[fc1.b])?;
                    let h = tape.add(h, b1)?;
                    let h = tape.relu(h);
                    let y = tape.matmul(h, p[fc2.w])?;
                    let b2 = tape.matmul(ones, p[fc2.b])?;
                    let y = tape.add(y, b2)?;
                    let y = tape.matmul(p[mix.w], y)?;
                    let ones_cells = tape.constant(Tensor::full(&[1, rows * cols], T::one()));
                    let bm = tape.matmul(p[mix.b], ones_cells)?;
                    tape.add(y, bm)?
                }
            };
            let y = tape.reshape(y, &[c, rows, cols])?;
            total = Some(match total {
                Some(t) => tape.add(t, y)?,
                None => y,
            });
        }
        Ok(total.expect("at least one view"))
    }

    /// Camera-frame class logits of one ground-plane warp.
    pub fn segment<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        ipm: Var,
    ) -> Result<Var, ModelError> {
        let [d0, d1, d2, u1, u0, head] = self.layout.seg;
        let e0 = Self::conv(tape, p, d0, ipm, 1, true)?;
        let e1 = Self::conv(tape, p, d1, e0, 2, true)?;
        let e2 = Self::conv(tape, p, d2, e1, 2, true)?;
        let x = tape.conv_transpose2x(e2, p[u1.w], p[u1.b])?;
        let x = tape.relu(x);
        let x = tape.add(x, e1)?;
        let x = tape.conv_transpose2x(x, p[u0.w], p[u0.b])?;
        let x = tape.relu(x);
        let x = tape.add(x, e0)?;
        Self::conv(tape, p, head, x, 1, false)
    }

    /// Local stream: segment each warp, then average the logits into the ego
    /// grid. Returns the ego feature grid and the per-view camera logits.
    pub fn lv_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        ipm_images: &[Var],
        taps: Arc<ResampleTaps>,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        self.check_views(ipm_images.len())?;
        let logits = ipm_images
            .iter()
            .map(|&x| self.segment(tape, p, x))
            .collect::<Result<Vec<_>, _>>()?;
        let f_lv = tape.resample(&logits, taps)?;
        Ok((f_lv, logits))
    }

    /// Per-cell foreground probability from a stream's feature grid.
    pub fn foreground_head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        stream: Stream,
        features: Var,
    ) -> Result<Var, ModelError> {
        let l = match stream {
            Stream::Global => self.layout.fg_gv,
            Stream::Local => self.layout.fg_lv,
        };
        let z = Self::conv(tape, p, l, features, 1, false)?;
        Ok(tape.sigmoid(z))
    }

    /// Per-class probabilities from the fused feature grid.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        fused: Var,
    ) -> Result<Var, ModelError> {
        let [c1, c2, head] = self.layout.dec;
        let x = Self::conv(tape, p, c1, fused, 1, true)?;
        let x = Self::conv(tape, p, c2, x, 1, true)?;
        let x = Self::conv(tape, p, head, x, 1, false)?;
        Ok(tape.sigmoid(x))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        input: &FrameInput,
    ) -> Result<StreamOutputs, ModelError> {
        let images: Vec<Var> = input
            .images
            .iter()
            .map(|t| tape.constant(t.cast()))
            .collect();
        let ipm: Vec<Var> = input
            .ipm_images
            .iter()
            .map(|t| tape.constant(t.cast()))
            .collect();
        let f_gv = self.gv_forward(tape, p, &images)?;
        let (f_lv, per_view_lv_logits) = self.lv_forward(tape, p, &ipm, input.taps.clone())?;
        let fg_gv = self.foreground_head(tape, p, Stream::Global, f_gv)?;
        let fg_lv = self.foreground_head(tape, p, Stream::Local, f_lv)?;
        let fused = fuse(tape, f_gv, f_lv, self.config.fusion)?;
        let probs = self.decode(tape, p, fused)?;
        Ok(StreamOutputs {
            f_gv,
            f_lv,
            per_view_lv_logits,
            fg_gv,
            fg_lv,
            fused,
            probs,
        })
    }

    /// Inference: class map for one frame.
    pub fn predict(&self, input: &FrameInput) -> Result<SemanticGrid, ModelError> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, input)?;
        let (rows, cols) = self.config.grid_size;
        Ok(probs_to_grid(tape.value(out.probs).data(), self.config.classes, rows, cols))
    }

    fn check_views(&self, got: usize) -> Result<(), ModelError> {
        if got != self.config.n_views {
            return Err(ModelError::ViewCountMismatch {
                expected: self.config.n_views,
                got,
            });
        }
        Ok(())
    }
}

/// Weighted sum `w_gv * f_gv + w_lv * f_lv`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    f_gv: Var,
    f_lv: Var,
    weights: (f64, f64),
) -> Result<Var, AutodiffError> {
    let a = tape.scale(f_gv, T::lit(weights.0));
    let b = tape.scale(f_lv, T::lit(weights.1));
    tape.add(a, b)
}

/// Class map from `[classes, rows, cols]` probabilities: the most likely
/// class if its probability reaches 0.5, else background.
pub fn probs_to_grid<T: Scalar>(probs: &[T], classes: usize, rows: usize, cols: usize) -> SemanticGrid {
    let n = rows * cols;
    let half = T::lit(0.5);
    let data = (0..n)
        .map(|i| {
            let (k, p) = (0..classes)
                .map(|k| (k, probs[k * n + i]))
                .fold((0, T::neg_infinity()), |a, b| if b.1 > a.1 { b } else { a });
            if p >= half {
                (k + 1) as u8
            } else {
                BACKGROUND
            }
        })
        .collect();
    SemanticGrid::from_raw(cols, rows, data).expect("size matches")
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_FORMAT: &str = "bimapper-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob that follows the header line.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

/// A model plus the training position it was saved at.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: BiMapperModel,
    pub epoch: usize,
    pub seed: u64,
}

impl Checkpoint {
    /// One JSON header line, then little-endian `f32` values of every
    /// parameter in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .model
            .params
            .iter()
            .map(|p| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                };
                offset += 4 * p.value.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.model.config,
            epoch: self.epoch,
            seed: self.seed,
            params,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(offset);
        for p in &self.model.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, ModelError> {
        let fmt = |message: String| ModelError::Format {
            path: path.to_path_buf(),
            message,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| fmt(e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(fmt(format!("unknown format {:?}", header.format)));
        }
        let blob = &bytes[nl + 1..];
        let params = header
            .params
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let raw = blob
                    .get(e.offset..e.offset + 4 * n)
                    .ok_or_else(|| fmt(format!("{} runs past the end of the blob", e.name)))?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(Param {
                    name: e.name.clone(),
                    value: Tensor::new(&e.shape, data)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            model: BiMapperModel::from_params(header.config, params)?,
            epoch: header.epoch,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}
