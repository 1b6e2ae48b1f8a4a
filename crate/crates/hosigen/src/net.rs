//! The denoiser network and its condition encoders: a transformer encoder over
//! window frame tokens plus condition tokens (five scene windows, text, goals,
//! object geometry, timestep, guidance strength), with a small ViT for scene
//! voxel windows. Everything runs on the `tape` substrate in f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::FRAME_FEATURES;
use crate::tape::{one_hot, Tape, Var};
use crate::util;
use crate::voxel::VoxelGrid;

/// Dimension of the sinusoidal embedding per spatial coordinate.
const PE_PER_COORD: usize = 16;
/// Dimension of the sinusoidal timestep / guidance-strength embeddings.
const SCALAR_PE: usize = 64;
/// Rows in the fixed random text-token table.
const TEXT_VOCAB: usize = 1024;
/// Seed for the fixed text table; the table is regenerated, never stored.
const TEXT_TABLE_SEED: u64 = 0x7e47_7ab1e;
/// Multiplier applied to omega before sinusoidal embedding, so the usual
/// guidance range [0, 3] spans distinguishable frequencies.
const OMEGA_SCALE: f64 = 100.0;

/// Number of condition tokens prepended to the frame tokens:
/// 5 scene + text + pelvis goal + object goal + object geom + timestep + omega.
pub const COND_TOKENS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_model: usize,
    pub denoiser_layers: usize,
    pub denoiser_heads: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    /// Frames per generation window (W).
    pub window_frames: usize,
    /// Voxels per ViT patch edge.
    pub patch_size: usize,
    /// Voxels per window edge (must be divisible by patch_size).
    pub window_resolution: usize,
    pub text_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        // Desk-scale defaults; the reference-scale variant uses d_model 512,
        // 8 denoiser layers, 6 ViT layers and 16 heads.
        NetConfig {
            d_model: 128,
            denoiser_layers: 4,
            denoiser_heads: 4,
            vit_layers: 3,
            vit_heads: 4,
            window_frames: 32,
            patch_size: 8,
            window_resolution: 32,
            text_dim: 768,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.denoiser_heads != 0 || self.d_model % self.vit_heads != 0 {
            return Err(Error::InvalidSpec(
                "d_model must be divisible by the head counts".into(),
            ));
        }
        if self.window_frames < 4 {
            return Err(Error::InvalidSpec("window_frames must be >= 4".into()));
        }
        if self.window_resolution % self.patch_size != 0 {
            return Err(Error::InvalidSpec(
                "window_resolution must be divisible by patch_size".into(),
            ));
        }
        if self.text_dim != 768 {
            return Err(Error::InvalidSpec("text_dim must be 768".into()));
        }
        Ok(())
    }

    pub fn patches_per_window(&self) -> usize {
        let per_axis = self.window_resolution / self.patch_size;
        per_axis * per_axis * per_axis
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }
}

/// Per-feature normalization applied to motion features before noising.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: vec![0.0; FRAME_FEATURES],
            std: vec![1.0; FRAME_FEATURES],
        }
    }

    /// Stats over a set of feature rows; std is clamped away from zero.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; FRAME_FEATURES];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; FRAME_FEATURES];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Normalizer {
            mean,
            std: var.iter().map(|v| v.sqrt().max(1e-3)).collect(),
        }
    }

    pub fn normalize_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.outer_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    /// Tape-side denormalization of a [w, FRAME_FEATURES] variable.
    pub fn denorm_on_tape(&self, tape: &mut Tape, x: Var, w: usize) -> Var {
        let std = Array2::from_shape_fn((w, FRAME_FEATURES), |(_, c)| self.std[c]).into_dyn();
        let mean = Array2::from_shape_fn((w, FRAME_FEATURES), |(_, c)| self.mean[c]).into_dyn();
        let s = tape.mul_const(x, &std);
        tape.add_const(s, &mean)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter tensors in a fixed creation order.
#[derive(Clone)]
pub struct ModelParams {
    pub config: NetConfig,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    pub tensors: Vec<Arc<ArrayD<f64>>>,
}

struct ParamBuilder {
    rng: rand_chacha::ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Arc<ArrayD<f64>>>,
}

impl ParamBuilder {
    fn glorot(&mut self, name: &str, rows: usize, cols: usize) {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let t = Array2::from_shape_fn((rows, cols), |_| {
            self.rng.gen_range(-1.0f64..1.0) * std * 1.7320508
        });
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t.into_dyn()));
    }

    fn tiny2(&mut self, name: &str, rows: usize, cols: usize) {
        let t = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-0.01f64..0.01));
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t.into_dyn()));
    }

    fn zeros1(&mut self, name: &str, n: usize) {
        self.names.push(name.to_string());
        self.tensors
            .push(Arc::new(Array1::<f64>::zeros(n).into_dyn()));
    }

    fn ones1(&mut self, name: &str, n: usize) {
        self.names.push(name.to_string());
        self.tensors
            .push(Arc::new(Array1::<f64>::ones(n).into_dyn()));
    }

    fn small2(&mut self, name: &str, rows: usize, cols: usize) {
        let t = Array2::from_shape_fn((rows, cols), |_| self.rng.gen_range(-0.02f64..0.02));
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t.into_dyn()));
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) {
        self.glorot(&format!("{prefix}.w"), out, inp);
        self.zeros1(&format!("{prefix}.b"), out);
    }

    fn mlp2(&mut self, prefix: &str, out: usize, hidden: usize, inp: usize) {
        self.linear(&format!("{prefix}.l1"), hidden, inp);
        self.linear(&format!("{prefix}.l2"), out, hidden);
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.ones1(&format!("{prefix}.ln1.g"), d);
        self.zeros1(&format!("{prefix}.ln1.b"), d);
        self.linear(&format!("{prefix}.attn.q"), d, d);
        self.linear(&format!("{prefix}.attn.k"), d, d);
        self.linear(&format!("{prefix}.attn.v"), d, d);
        self.linear(&format!("{prefix}.attn.o"), d, d);
        self.ones1(&format!("{prefix}.ln2.g"), d);
        self.zeros1(&format!("{prefix}.ln2.b"), d);
        self.linear(&format!("{prefix}.mlp.l1"), hidden, d);
        self.linear(&format!("{prefix}.mlp.l2"), d, hidden);
    }
}

impl ModelParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = config.mlp_hidden();
        let mut b = ParamBuilder {
            rng: util::rng_for(seed, &[0x9a7a]),
            names: Vec::new(),
            tensors: Vec::new(),
        };

        b.small2("null_dyn", 1, d);

        b.linear("vit.patch", d, config.patch_features());
        b.small2("vit.pos", config.patches_per_window(), d);
        for i in 0..config.vit_layers {
            b.block(&format!("vit.blk{i}"), d, hidden);
        }
        b.ones1("vit.lnf.g", d);
        b.zeros1("vit.lnf.b", d);
        b.linear("vit.center", d, 3 * PE_PER_COORD);

        b.mlp2("text", d, d, config.text_dim);
        b.mlp2("goal_h", d, d, 2);
        b.mlp2("goal_o", d, d, 3);
        b.mlp2("obj", d, d, 3 * crate::kinematics::BPS_COUNT);
        b.mlp2("time", d, d, SCALAR_PE);
        b.mlp2("omega", d, d, SCALAR_PE);

        b.mlp2("den.in", d, d, FRAME_FEATURES);
        for i in 0..config.denoiser_layers {
            b.block(&format!("den.blk{i}"), d, hidden);
        }
        b.ones1("den.lnf.g", d);
        b.zeros1("den.lnf.b", d);
        b.linear("den.out.l1", d, d);
        // Near-zero head: initial predictions sit at the dataset mean in
        // normalized feature space, which keeps early FK losses well-defined.
        b.tiny2("den.out.l2.w", FRAME_FEATURES, d);
        b.zeros1("den.out.l2.b", FRAME_FEATURES);

        let index = b
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ModelParams {
            config,
            names: b.names,
            index,
            tensors: b.tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn tensor(&self, name: &str) -> &ArrayD<f64> {
        &self.tensors[self.idx(name)]
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Finite check over every tensor.
    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// In-place EMA update: self = decay*self + (1-decay)*other.
    pub fn ema_from(&mut self, other: &ModelParams, decay: f64) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch("parameter set size differs".into()));
        }
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if t.shape() != o.shape() {
                return Err(Error::ShapeMismatch("parameter tensor shape differs".into()));
            }
            let arr = Arc::make_mut(t);
            arr.zip_mut_with(o, |a, &b| *a = decay * *a + (1.0 - decay) * b);
        }
        Ok(())
    }
}

/// Parameters bound to a tape as leaves, in registry order.
pub struct Bound<'p> {
    params: &'p ModelParams,
    pub vars: Vec<Var>,
}

pub fn bind<'p>(tape: &mut Tape, params: &'p ModelParams) -> Bound<'p> {
    let vars = params
        .tensors
        .iter()
        .map(|t| tape.leaf(Arc::clone(t)))
        .collect();
    Bound { params, vars }
}

impl Bound<'_> {
    pub fn v(&self, name: &str) -> Var {
        self.vars[self.params.idx(name)]
    }

    pub fn config(&self) -> &NetConfig {
        &self.params.config
    }
}

// ---------------------------------------------------------------------------
// Forward building blocks
// ---------------------------------------------------------------------------

fn linear(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.v(&format!("{prefix}.w"));
    let bias = b.v(&format!("{prefix}.b"));
    let h = tape.matmul_nt(x, w);
    tape.add_bias(h, bias)
}

fn mlp2(tape: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Var {
    let h = linear(tape, b, &format!("{prefix}.l1"), x);
    let h = tape.gelu(h);
    linear(tape, b, &format!("{prefix}.l2"), h)
}

fn attention(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    let d = b.config().d_model;
    let dh = d / heads;
    let q = linear(tape, b, &format!("{prefix}.q"), x);
    let k = linear(tape, b, &format!("{prefix}.k"), x);
    let v = linear(tape, b, &format!("{prefix}.v"), x);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&outs);
    linear(tape, b, &format!("{prefix}.o"), cat)
}

fn transformer_block(tape: &mut Tape, b: &Bound, prefix: &str, x: Var, heads: usize) -> Var {
    let ln1 = tape.layer_norm(x, b.v(&format!("{prefix}.ln1.g")), b.v(&format!("{prefix}.ln1.b")));
    let att = attention(tape, b, &format!("{prefix}.attn"), ln1, heads);
    let x = tape.add(x, att);
    let ln2 = tape.layer_norm(x, b.v(&format!("{prefix}.ln2.g")), b.v(&format!("{prefix}.ln2.b")));
    let mlp = mlp2(tape, b, &format!("{prefix}.mlp"), ln2);
    tape.add(x, mlp)
}

/// Sinusoidal token-index encoding as a constant [n, d] array.
fn token_posenc(n: usize, d: usize) -> ArrayD<f64> {
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let e = util::sinusoid_embed(i as f64, d + d % 2);
        for c in 0..d {
            out[(i, c)] = e[c];
        }
    }
    out.into_dyn()
}

// ---------------------------------------------------------------------------
// Condition encoders
// ---------------------------------------------------------------------------

/// Scene window token: patched one-hot voxels through the ViT, mean-pooled,
/// plus the projected sinusoidal encoding of the window center.
pub fn encode_scene(
    tape: &mut Tape,
    b: &Bound,
    window: &VoxelGrid,
    center: [f64; 3],
) -> Result<Var> {
    let cfg = b.config();
    let r = cfg.window_resolution;
    if window.spec.dims != [r, r, r] {
        return Err(Error::ShapeMismatch(format!(
            "window resolution {:?} does not match config {r}",
            window.spec.dims
        )));
    }
    let p = cfg.patch_size;
    let per_axis = r / p;
    // Cell labels reordered patch-major (then x-fastest within each patch) so a
    // row-major reshape groups each patch's one-hot block contiguously.
    let mut labels = Vec::with_capacity(r * r * r);
    for pz in 0..per_axis {
        for py in 0..per_axis {
            for px in 0..per_axis {
                for z in 0..p {
                    for y in 0..p {
                        for x in 0..p {
                            labels.push(
                                window.get([px * p + x, py * p + y, pz * p + z]) as usize
                            );
                        }
                    }
                }
            }
        }
    }
    let oh = one_hot(&labels, 3);
    let patches = oh
        .into_shape_with_order((cfg.patches_per_window(), cfg.patch_features()))
        .expect("patch reshape");
    let x = tape.input2(patches);
    let mut h = linear(tape, b, "vit.patch", x);
    let pos = tape.gather_rows(
        b.v("vit.pos"),
        (0..cfg.patches_per_window()).collect(),
    );
    h = tape.add(h, pos);
    for i in 0..cfg.vit_layers {
        h = transformer_block(tape, b, &format!("vit.blk{i}"), h, cfg.vit_heads);
    }
    let h = tape.layer_norm(h, b.v("vit.lnf.g"), b.v("vit.lnf.b"));
    let pooled = tape.mean_rows(h);
    // Additive fusion with the center position encoding.
    let pe = Array2::from_shape_vec(
        (1, 3 * PE_PER_COORD),
        util::sinusoid_embed_3d(center, PE_PER_COORD),
    )
    .unwrap();
    let pe_in = tape.input2(pe);
    let pe_tok = linear(tape, b, "vit.center", pe_in);
    Ok(tape.add(pooled, pe_tok))
}

/// Scene token value computed on a throwaway tape (generation path).
pub fn encode_scene_value(
    params: &ModelParams,
    window: &VoxelGrid,
    center: [f64; 3],
) -> Result<ArrayD<f64>> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let v = encode_scene(&mut tape, &b, window, center)?;
    Ok(tape.value(v).clone())
}

static TEXT_TABLE: OnceLock<Array2<f64>> = OnceLock::new();

fn text_table() -> &'static Array2<f64> {
    TEXT_TABLE.get_or_init(|| {
        let mut rng = util::rng_for(TEXT_TABLE_SEED, &[]);
        Array2::from_shape_fn((TEXT_VOCAB, 768), |_| rng.gen_range(-1.0f64..1.0))
    })
}

/// Mean-pooled hash embedding of the lowercased, whitespace-split text. The
/// empty string maps to the zero 768-vector before projection, so its token is
/// a fixed null vector for a given parameter set.
pub fn encode_text(tape: &mut Tape, b: &Bound, text: &str) -> Var {
    let table = text_table();
    let lower = text.to_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    let mut pooled = Array1::<f64>::zeros(768);
    if !tokens.is_empty() {
        for t in &tokens {
            let row = (util::fnv1a64(t.as_bytes()) % TEXT_VOCAB as u64) as usize;
            pooled += &table.row(row);
        }
        pooled /= tokens.len() as f64;
    }
    let x = tape.input2(pooled.insert_axis(ndarray::Axis(0)));
    mlp2(tape, b, "text", x)
}

/// Pelvis-goal and object-goal tokens. An absent object goal yields the
/// all-zeros token.
pub fn encode_goals(
    tape: &mut Tape,
    b: &Bound,
    pelvis_goal: [f64; 2],
    object_goal: Option<[f64; 3]>,
) -> (Var, Var) {
    let d = b.config().d_model;
    let hx = tape.input2(Array2::from_shape_vec((1, 2), pelvis_goal.to_vec()).unwrap());
    let h = mlp2(tape, b, "goal_h", hx);
    let o = match object_goal {
        Some(g) => {
            let ox = tape.input2(Array2::from_shape_vec((1, 3), g.to_vec()).unwrap());
            mlp2(tape, b, "goal_o", ox)
        }
        None => tape.input2(Array2::<f64>::zeros((1, d))),
    };
    (h, o)
}

/// Object geometry token from the flattened BPS encoding.
pub fn encode_object_geom(tape: &mut Tape, b: &Bound, bps: &[[f64; 3]]) -> Var {
    let flat: Vec<f64> = bps.iter().flatten().cloned().collect();
    let x = tape.input2(Array2::from_shape_vec((1, flat.len()), flat).unwrap());
    mlp2(tape, b, "obj", x)
}

fn scalar_token(tape: &mut Tape, b: &Bound, prefix: &str, value: f64) -> Var {
    let pe = Array2::from_shape_vec((1, SCALAR_PE), util::sinusoid_embed(value, SCALAR_PE))
        .unwrap();
    let x = tape.input2(pe);
    mlp2(tape, b, prefix, x)
}

/// Raw (un-encoded) conditions for one generation window.
#[derive(Debug, Clone)]
pub struct ConditionInputs {
    /// Start and goal windows with their centers (static across the episode).
    pub static_windows: Vec<(VoxelGrid, [f64; 3])>,
    /// Three dynamic windows with their centers.
    pub dynamic_windows: Vec<(VoxelGrid, [f64; 3])>,
    /// Masked dynamic slots use the learned null token instead of content.
    pub dynamic_mask: [bool; 3],
    pub text: String,
    pub pelvis_goal: [f64; 2],
    pub object_goal: Option<[f64; 3]>,
    pub bps: Vec<[f64; 3]>,
}

/// Condition tokens living on a tape.
pub struct ConditionVars {
    pub scene: Vec<Var>,
    pub text: Var,
    pub pelvis_goal: Var,
    pub object_goal: Var,
    pub object_geom: Var,
}

/// Encodes the full condition set on the tape (training path: gradients flow
/// into every encoder). Masked dynamic windows use the null token and their
/// content is never touched.
pub fn encode_conditions(
    tape: &mut Tape,
    b: &Bound,
    inputs: &ConditionInputs,
) -> Result<ConditionVars> {
    if inputs.static_windows.len() != 2 || inputs.dynamic_windows.len() != 3 {
        return Err(Error::ShapeMismatch(
            "expected 2 static and 3 dynamic windows".into(),
        ));
    }
    let mut scene = Vec::with_capacity(5);
    for (w, c) in &inputs.static_windows {
        scene.push(encode_scene(tape, b, w, *c)?);
    }
    for (i, (w, c)) in inputs.dynamic_windows.iter().enumerate() {
        if inputs.dynamic_mask[i] {
            scene.push(b.v("null_dyn"));
        } else {
            scene.push(encode_scene(tape, b, w, *c)?);
        }
    }
    let text = encode_text(tape, b, &inputs.text);
    let (pelvis_goal, object_goal) =
        encode_goals(tape, b, inputs.pelvis_goal, inputs.object_goal);
    let object_geom = encode_object_geom(tape, b, &inputs.bps);
    Ok(ConditionVars {
        scene,
        text,
        pelvis_goal,
        object_goal,
        object_geom,
    })
}

/// Pre-encoded condition token values (generation path: static tokens are
/// computed once per window and re-fed as constants).
#[derive(Debug, Clone)]
pub struct EncodedConditions {
    pub scene: Vec<ArrayD<f64>>,
    pub text: ArrayD<f64>,
    pub pelvis_goal: ArrayD<f64>,
    pub object_goal: ArrayD<f64>,
    pub object_geom: ArrayD<f64>,
}

/// Encodes conditions with a throwaway tape and returns the token values.
pub fn encode_conditions_values(
    params: &ModelParams,
    inputs: &ConditionInputs,
) -> Result<EncodedConditions> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let cv = encode_conditions(&mut tape, &b, inputs)?;
    Ok(EncodedConditions {
        scene: cv.scene.iter().map(|v| tape.value(*v).clone()).collect(),
        text: tape.value(cv.text).clone(),
        pelvis_goal: tape.value(cv.pelvis_goal).clone(),
        object_goal: tape.value(cv.object_goal).clone(),
        object_geom: tape.value(cv.object_geom).clone(),
    })
}

impl EncodedConditions {
    /// The unconditional variant: dynamic scene tokens (slots 2..5) replaced
    /// by the learned null token.
    pub fn with_masked_dynamic(&self, params: &ModelParams) -> EncodedConditions {
        let mut out = self.clone();
        let null = params.tensor("null_dyn").clone();
        for i in 2..5 {
            out.scene[i] = null.clone();
        }
        out
    }

    /// Re-binds stored token values onto a tape as constants.
    pub fn to_vars(&self, tape: &mut Tape) -> ConditionVars {
        ConditionVars {
            scene: self
                .scene
                .iter()
                .map(|t| tape.leaf(Arc::new(t.clone())))
                .collect(),
            text: tape.leaf(Arc::new(self.text.clone())),
            pelvis_goal: tape.leaf(Arc::new(self.pelvis_goal.clone())),
            object_goal: tape.leaf(Arc::new(self.object_goal.clone())),
            object_geom: tape.leaf(Arc::new(self.object_geom.clone())),
        }
    }
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Clean-sample prediction from a noisy window. `x_noisy` is [W, 145] in
/// normalized feature space; `prefix` replaces rows 0..2 with clean frames
/// before embedding. Returns the [W, 145] x0 prediction on the tape.
pub fn denoise(
    tape: &mut Tape,
    b: &Bound,
    x_noisy: &Array2<f64>,
    prefix: Option<&Array2<f64>>,
    cond: &ConditionVars,
    timestep: usize,
    omega: f64,
) -> Result<Var> {
    let cfg = b.config();
    let w = cfg.window_frames;
    if x_noisy.nrows() != w || x_noisy.ncols() != FRAME_FEATURES {
        return Err(Error::ShapeMismatch(format!(
            "x_noisy shape {:?}, expected [{w}, {FRAME_FEATURES}]",
            x_noisy.shape()
        )));
    }
    let mut frames_in = x_noisy.clone();
    if let Some(p) = prefix {
        if p.nrows() != 2 || p.ncols() != FRAME_FEATURES {
            return Err(Error::ShapeMismatch("prefix must be [2, features]".into()));
        }
        frames_in.slice_mut(ndarray::s![0..2, ..]).assign(p);
    }
    let frames_var = tape.input2(frames_in);
    let frame_tokens = mlp2(tape, b, "den.in", frames_var);

    let time_tok = scalar_token(tape, b, "time", timestep as f64);
    let omega_tok = scalar_token(tape, b, "omega", omega * OMEGA_SCALE);

    let mut tokens: Vec<Var> = Vec::with_capacity(COND_TOKENS + 1);
    tokens.extend_from_slice(&cond.scene);
    tokens.push(cond.text);
    tokens.push(cond.pelvis_goal);
    tokens.push(cond.object_goal);
    tokens.push(cond.object_geom);
    tokens.push(time_tok);
    tokens.push(omega_tok);
    tokens.push(frame_tokens);
    let mut h = tape.concat_rows(&tokens);

    let pe = token_posenc(COND_TOKENS + w, cfg.d_model);
    h = tape.add_const(h, &pe);

    for i in 0..cfg.denoiser_layers {
        h = transformer_block(tape, b, &format!("den.blk{i}"), h, cfg.denoiser_heads);
    }
    h = tape.layer_norm(h, b.v("den.lnf.g"), b.v("den.lnf.b"));
    let out_tokens = tape.slice_rows(h, COND_TOKENS, w);
    let h1 = linear(tape, b, "den.out.l1", out_tokens);
    let h1 = tape.gelu(h1);
    Ok(linear(tape, b, "den.out.l2", h1))
}

/// Convenience forward pass without gradient use: returns the x0 prediction.
pub fn denoise_value(
    params: &ModelParams,
    x_noisy: &Array2<f64>,
    prefix: Option<&Array2<f64>>,
    cond: &EncodedConditions,
    timestep: usize,
    omega: f64,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let b = bind(&mut tape, params);
    let cv = cond.to_vars(&mut tape);
    let out = denoise(&mut tape, &b, x_noisy, prefix, &cv, timestep, omega)?;
    Ok(tape
        .value(out)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .into_owned())
}

// ---------------------------------------------------------------------------
// Checkpoint format (versioned, little-endian):
//   magic "HSGC", u32 version, u64 header length, JSON header,
//   then for each section in header order, tensors in registry order as f64 LE.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: NetConfig,
    pub normalizer: Normalizer,
    pub step: usize,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    tensors: Vec<(String, Vec<usize>)>,
    sections: Vec<String>,
}

/// A checkpoint: model parameters plus optional named auxiliary sections
/// (EMA copy, optimizer moments) with identical tensor layout.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub sections: BTreeMap<String, Vec<ArrayD<f64>>>,
}

const CKPT_MAGIC: &[u8; 4] = b"HSGC";
const CKPT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        meta: ckpt.meta.clone(),
        tensors: ckpt
            .params
            .names()
            .iter()
            .cloned()
            .zip(ckpt.params.shapes())
            .collect(),
        sections: std::iter::once("params".to_string())
            .chain(ckpt.sections.keys().cloned())
            .collect(),
    };
    let hjson = serde_json::to_vec(&header)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;
    let mut write_tensors = |tensors: &[ArrayD<f64>]| -> Result<()> {
        for t in tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    };
    let params_owned: Vec<ArrayD<f64>> = ckpt
        .params
        .tensors
        .iter()
        .map(|t| t.as_ref().clone())
        .collect();
    write_tensors(&params_owned)?;
    for tensors in ckpt.sections.values() {
        write_tensors(tensors)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)?;
    let header: CheckpointHeader = serde_json::from_slice(&hjson)?;

    let mut read_tensors = |shapes: &[(String, Vec<usize>)]| -> Result<Vec<ArrayD<f64>>> {
        let mut out = Vec::with_capacity(shapes.len());
        for (_, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut data = vec![0f64; n];
            let mut buf = [0u8; 8];
            for d in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *d = f64::from_le_bytes(buf);
            }
            out.push(ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| {
                Error::Format(format!("bad tensor shape in checkpoint: {e}"))
            })?);
        }
        Ok(out)
    };

    let mut params = ModelParams::init(header.meta.config, 0)?;
    // Validate the manifest matches the architecture implied by the config.
    let expect: Vec<(String, Vec<usize>)> = params
        .names()
        .iter()
        .cloned()
        .zip(params.shapes())
        .collect();
    if expect != header.tensors {
        return Err(Error::Format(
            "checkpoint tensor manifest does not match config".into(),
        ));
    }
    let loaded = read_tensors(&header.tensors)?;
    params.tensors = loaded.into_iter().map(Arc::new).collect();

    let mut sections = BTreeMap::new();
    for s in header.sections.iter().filter(|s| s.as_str() != "params") {
        sections.insert(s.clone(), read_tensors(&header.tensors)?);
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
        sections,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(ckpt, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{CellLabel, GridSpec, VoxelGrid};

    pub(crate) fn tiny_config() -> NetConfig {
        NetConfig {
            d_model: 16,
            denoiser_layers: 2,
            denoiser_heads: 2,
            vit_layers: 1,
            vit_heads: 2,
            window_frames: 4,
            patch_size: 4,
            window_resolution: 8,
            text_dim: 768,
        }
    }

    fn tiny_window(fill: CellLabel) -> VoxelGrid {
        VoxelGrid::filled(
            GridSpec {
                origin: [0.0; 3],
                cell_size: 0.15,
                dims: [8, 8, 8],
            },
            fill,
        )
        .unwrap()
    }

    fn tiny_inputs() -> ConditionInputs {
        ConditionInputs {
            static_windows: vec![
                (tiny_window(CellLabel::Free), [0.0, 0.0, 0.9]),
                (tiny_window(CellLabel::Free), [2.0, 0.0, 0.9]),
            ],
            dynamic_windows: vec![
                (tiny_window(CellLabel::Free), [0.5, 0.0, 0.9]),
                (tiny_window(CellLabel::Free), [1.0, 0.0, 0.9]),
                (tiny_window(CellLabel::Free), [1.5, 0.0, 0.9]),
            ],
            dynamic_mask: [false; 3],
            text: "carry the crate to the goal".to_string(),
            pelvis_goal: [2.0, 0.0],
            object_goal: Some([2.0, 0.3, 0.25]),
            bps: vec![[0.1, 0.0, -0.1]; crate::kinematics::BPS_COUNT],
        }
    }

    #[test]
    fn config_invariants() {
        assert!(NetConfig::default().validate().is_ok());
        let mut bad = NetConfig::default();
        bad.d_model = 130;
        assert!(bad.validate().is_err());
        let mut bad = NetConfig::default();
        bad.window_frames = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_scene_deterministic_and_sensitive() {
        let params = ModelParams::init(tiny_config(), 7).unwrap();
        let w = tiny_window(CellLabel::Free);
        let run = |w: &VoxelGrid, c: [f64; 3]| -> Vec<f64> {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let v = encode_scene(&mut tape, &b, w, c).unwrap();
            tape.value(v).iter().cloned().collect()
        };
        let a = run(&w, [0.5, 0.5, 0.5]);
        let b2 = run(&w, [0.5, 0.5, 0.5]);
        assert_eq!(a, b2);
        // one-cell difference changes the embedding
        let mut w2 = w.clone();
        w2.set([3, 3, 3], CellLabel::Blocked);
        let c2 = run(&w2, [0.5, 0.5, 0.5]);
        assert_ne!(a, c2);
    }

    #[test]
    fn encode_scene_center_additivity() {
        // Content-only pooling means two centers differ by exactly the
        // positional-encoding difference.
        let params = ModelParams::init(tiny_config(), 8).unwrap();
        let w = tiny_window(CellLabel::Free);
        let c1 = [0.1, 0.2, 0.3];
        let c2 = [1.5, -0.4, 0.8];
        let token = |c: [f64; 3]| -> Vec<f64> {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let v = encode_scene(&mut tape, &b, &w, c).unwrap();
            tape.value(v).iter().cloned().collect()
        };
        let pe_only = |c: [f64; 3]| -> Vec<f64> {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let pe = Array2::from_shape_vec(
                (1, 3 * PE_PER_COORD),
                util::sinusoid_embed_3d(c, PE_PER_COORD),
            )
            .unwrap();
            let x = tape.input2(pe);
            let v = linear(&mut tape, &b, "vit.center", x);
            tape.value(v).iter().cloned().collect()
        };
        let t1 = token(c1);
        let t2 = token(c2);
        let p1 = pe_only(c1);
        let p2 = pe_only(c2);
        for i in 0..t1.len() {
            assert!(((t1[i] - t2[i]) - (p1[i] - p2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_scene_rejects_resolution_mismatch() {
        let params = ModelParams::init(tiny_config(), 9).unwrap();
        let wrong = VoxelGrid::filled(
            GridSpec {
                origin: [0.0; 3],
                cell_size: 0.15,
                dims: [4, 4, 4],
            },
            CellLabel::Free,
        )
        .unwrap();
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params);
        assert!(encode_scene(&mut tape, &b, &wrong, [0.0; 3]).is_err());
    }

    #[test]
    fn encode_text_contract() {
        let params = ModelParams::init(tiny_config(), 10).unwrap();
        let run = |s: &str| -> Vec<f64> {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let v = encode_text(&mut tape, &b, s);
            tape.value(v).iter().cloned().collect()
        };
        assert_eq!(run("carry the chair"), run("carry the chair"));
        assert_ne!(run("carry the chair"), run("kick the box"));
        // empty string: fixed null embedding (projection of the zero vector)
        let null = run("");
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params);
        let zero = tape.input2(Array2::<f64>::zeros((1, 768)));
        let v = mlp2(&mut tape, &b, "text", zero);
        let expect: Vec<f64> = tape.value(v).iter().cloned().collect();
        assert_eq!(null, expect);
        // case and whitespace insensitive
        assert_eq!(run("Carry  THE chair"), run("carry the chair"));
    }

    #[test]
    fn encode_goals_contract() {
        let params = ModelParams::init(tiny_config(), 11).unwrap();
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params);
        let (_h, o) = encode_goals(&mut tape, &b, [1.0, 2.0], None);
        assert!(tape.value(o).iter().all(|&v| v == 0.0));
        let (h1, _) = encode_goals(&mut tape, &b, [1.0, 2.0], None);
        let (h2, _) = encode_goals(&mut tape, &b, [1.0, 2.0], None);
        assert_eq!(
            tape.value(h1).iter().collect::<Vec<_>>(),
            tape.value(h2).iter().collect::<Vec<_>>()
        );
        let (h3, _) = encode_goals(&mut tape, &b, [0.0, -1.0], None);
        assert_ne!(
            tape.value(h1).iter().collect::<Vec<_>>(),
            tape.value(h3).iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn denoise_shape_and_mask_invariance() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 12).unwrap();
        let w = cfg.window_frames;
        let x = Array2::from_shape_fn((w, FRAME_FEATURES), |(r, c)| {
            ((r * 31 + c * 7) % 13) as f64 * 0.05 - 0.3
        });
        let run = |inputs: &ConditionInputs| -> Array2<f64> {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let cv = encode_conditions(&mut tape, &b, inputs).unwrap();
            let out = denoise(&mut tape, &b, &x, None, &cv, 100, 0.5).unwrap();
            tape.value(out)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .into_owned()
        };
        let mut inputs = tiny_inputs();
        inputs.dynamic_mask = [true; 3];
        let out1 = run(&inputs);
        assert_eq!(out1.shape(), &[w, FRAME_FEATURES]);
        // masked: replacing dynamic window content leaves output bit-identical
        let mut inputs2 = inputs.clone();
        for (w, _) in inputs2.dynamic_windows.iter_mut() {
            *w = tiny_window(CellLabel::Blocked);
        }
        let out2 = run(&inputs2);
        assert!(out1
            .iter()
            .zip(out2.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // unmasked: content matters
        let mut inputs3 = inputs.clone();
        inputs3.dynamic_mask = [false; 3];
        let out3 = run(&inputs3);
        let mut inputs4 = inputs3.clone();
        for (w, _) in inputs4.dynamic_windows.iter_mut() {
            *w = tiny_window(CellLabel::Blocked);
        }
        let out4 = run(&inputs4);
        assert_ne!(
            out3.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out4.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn denoise_prefix_rows_are_clean_embeddings() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 13).unwrap();
        let w = cfg.window_frames;
        let x1 = Array2::from_elem((w, FRAME_FEATURES), 0.7);
        let mut x2 = x1.clone();
        // change only rows 0..2 of the noisy input; with a prefix given the
        // output must not change
        x2[(0, 5)] = -3.0;
        x2[(1, 9)] = 4.0;
        let prefix = Array2::from_elem((2, FRAME_FEATURES), 0.1);
        let inputs = tiny_inputs();
        let run = |x: &Array2<f64>| -> Vec<u64> {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &params);
            let cv = encode_conditions(&mut tape, &b, &inputs).unwrap();
            let out = denoise(&mut tape, &b, x, Some(&prefix), &cv, 10, 0.0).unwrap();
            tape.value(out).iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(&x1), run(&x2));
    }

    #[test]
    fn denoise_param_gradients_match_finite_differences() {
        use rand::Rng;
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 14).unwrap();
        let w = cfg.window_frames;
        let mut rng = util::rng_for(99, &[]);
        let x = Array2::from_shape_fn((w, FRAME_FEATURES), |_| rng.gen_range(-1.0..1.0));
        let inputs = tiny_inputs();
        let loss_dir = Array2::from_shape_fn((w, FRAME_FEATURES), |_| rng.gen_range(-1.0..1.0));

        let eval = |p: &ModelParams| -> f64 {
            let mut tape = Tape::new();
            let b = bind(&mut tape, p);
            let cv = encode_conditions(&mut tape, &b, &inputs).unwrap();
            let out = denoise(&mut tape, &b, &x, None, &cv, 37, 1.3).unwrap();
            let dir = tape.input2(loss_dir.clone());
            let prod = tape.mul(out, dir);
            let l = tape.mean_all(prod);
            tape.value(l)[[0]]
        };

        // analytic gradient
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params);
        let cv = encode_conditions(&mut tape, &b, &inputs).unwrap();
        let out = denoise(&mut tape, &b, &x, None, &cv, 37, 1.3).unwrap();
        let dir = tape.input2(loss_dir.clone());
        let prod = tape.mul(out, dir);
        let l = tape.mean_all(prod);
        let grads = tape.backward(l);

        for probe in 0..20 {
            let dirs: Vec<ArrayD<f64>> = params
                .tensors
                .iter()
                .map(|t| ArrayD::from_shape_fn(t.raw_dim(), |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let eps = 1e-5;
            let shift = |sign: f64| -> ModelParams {
                let mut p = params.clone();
                p.tensors = p
                    .tensors
                    .iter()
                    .zip(&dirs)
                    .map(|(t, d)| Arc::new(t.as_ref() + &d.mapv(|v| v * eps * sign)))
                    .collect();
                p
            };
            let fd = (eval(&shift(1.0)) - eval(&shift(-1.0))) / (2.0 * eps);
            let mut analytic = 0.0;
            for (i, d) in dirs.iter().enumerate() {
                if let Some(g) = grads.get(b.vars[i]) {
                    analytic += (g * d).sum();
                }
            }
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (fd - analytic).abs() / denom < 1e-3,
                "probe {probe}: fd={fd} analytic={analytic}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let params = ModelParams::init(cfg, 21).unwrap();
        let mut sections = BTreeMap::new();
        sections.insert(
            "ema".to_string(),
            params.tensors.iter().map(|t| t.as_ref().clone()).collect(),
        );
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                kind: "teacher".into(),
                config: cfg,
                normalizer: Normalizer::identity(),
                step: 42,
                extra: serde_json::json!({"note": "test"}),
            },
            params,
            sections,
        };
        let mut buf = Vec::new();
        write_checkpoint(&ckpt, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.meta.step, 42);
        assert_eq!(back.meta.kind, "teacher");
        assert_eq!(back.params.names(), ckpt.params.names());
        for (a, b) in back.params.tensors.iter().zip(&ckpt.params.tensors) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
        assert!(back.sections.contains_key("ema"));
    }

    #[test]
    fn param_count_is_reported() {
        let params = ModelParams::init(tiny_config(), 3).unwrap();
        assert!(params.scalar_count() > 1000);
        assert!(params.all_finite());
    }
}

