//! MLP, GCN, single-head GAT and APPNP forward passes on the autodiff tape.
//!
//! Every model is a stack of `n_layers` linear transforms. Dropout is applied
//! to the input of every layer during training, ReLU follows every layer but
//! the last, and the last layer emits raw logits.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::linalg::{CsrMatrix, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Gcn,
    Gat,
    Appnp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Gcn => "gcn",
            ModelKind::Gat => "gat",
            ModelKind::Appnp => "appnp",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ModelKind::Mlp),
            "gcn" => Ok(ModelKind::Gcn),
            "gat" => Ok(ModelKind::Gat),
            "appnp" => Ok(ModelKind::Appnp),
            other => Err(Error::input(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Teleport probability of the APPNP propagation.
    pub appnp_alpha: f64,
    /// Number of APPNP propagation steps.
    pub appnp_k: usize,
    /// Negative slope of the LeakyReLU inside GAT attention scores.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gcn,
            n_layers: 2,
            hidden_dim: 64,
            dropout: 0.5,
            appnp_alpha: 0.1,
            appnp_k: 10,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind, n_layers: usize) -> Self {
        Self {
            kind,
            n_layers,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::input("n_layers must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::input("hidden_dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.appnp_alpha) {
            return Err(Error::input(format!("appnp_alpha {} outside [0, 1]", self.appnp_alpha)));
        }
        Ok(())
    }
}

/// Uniform Glorot initialization in `±√(6 / (d_in + d_out))`.
pub fn glorot_init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    Matrix::random_uniform(d_in, d_out, -bound, bound, rng)
}

/// Seeded variant of [`glorot_init`].
pub fn glorot_init_seeded(d_in: usize, d_out: usize, seed: u64) -> Matrix {
    glorot_init(d_in, d_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Matrix,
    /// `2·d_out × 1` attention vector, GAT only.
    pub attn: Option<Matrix>,
}

/// Parameters of one layer recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerTensors {
    pub weight: Tensor,
    pub bias: Tensor,
    pub attn: Option<Tensor>,
}

/// Node features fed to the first layer.
#[derive(Clone, Copy, Debug)]
pub enum Features<'a> {
    /// Constant sparse matrix; dropout acts on its stored values.
    Sparse(&'a Arc<CsrMatrix>),
    /// Tensor already on the tape.
    Dense(Tensor),
}

/// Graph operators shared by every forward pass on one graph.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub a_hat: NormalizedAdjacency,
    /// Sparsity pattern of `A + I`; attention is computed over these entries.
    pub attention_pattern: Arc<CsrMatrix>,
}

impl GraphContext {
    pub fn new(graph: &Graph) -> Self {
        let looped = graph.add_self_loops();
        Self {
            a_hat: NormalizedAdjacency::sym_normalize(&looped).expect("self-loops give positive degrees"),
            attention_pattern: Arc::new(looped.adjacency().clone()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.a_hat.n_nodes()
    }
}

/// Logits plus the input of the final layer (the last hidden representation).
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub hidden: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub in_dim: usize,
    pub n_classes: usize,
    pub layers: Vec<LayerParams>,
}

impl Model {
    pub fn new(config: ModelConfig, in_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 || n_classes == 0 {
            return Err(Error::input("input and output dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let d_in = if l == 0 { in_dim } else { config.hidden_dim };
            let d_out = if l + 1 == config.n_layers { n_classes } else { config.hidden_dim };
            let weight = glorot_init(d_in, d_out, &mut rng);
            let attn = (config.kind == ModelKind::Gat).then(|| glorot_init(2 * d_out, 1, &mut rng));
            layers.push(LayerParams {
                weight,
                bias: Matrix::zeros(1, d_out),
                attn,
            });
        }
        Ok(Self {
            config,
            in_dim,
            n_classes,
            layers,
        })
    }

    /// All parameter matrices in a fixed order: per layer weight, bias, attn.
    pub fn parameters(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(std::iter::once(&l.bias)).chain(l.attn.as_ref()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                std::iter::once(&mut l.weight)
                    .chain(std::iter::once(&mut l.bias))
                    .chain(l.attn.as_mut())
            })
            .collect()
    }

    /// `true` for parameters subject to weight decay (everything but biases),
    /// aligned with [`Model::parameters`].
    pub fn decay_mask(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut m = vec![true, false];
                if l.attn.is_some() {
                    m.push(true);
                }
                m
            })
            .collect()
    }

    pub fn parameter_shapes(&self) -> Vec<(usize, usize)> {
        self.parameters().iter().map(|m| m.shape()).collect()
    }

    /// Records the parameters on `tape`; `trainable` controls whether they
    /// collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerTensors> {
        self.layers
            .iter()
            .map(|l| LayerTensors {
                weight: tape.leaf(l.weight.clone(), trainable),
                bias: tape.leaf(l.bias.clone(), trainable),
                attn: l.attn.as_ref().map(|a| tape.leaf(a.clone(), trainable)),
            })
            .collect()
    }

    /// Gradients of the bound parameters, in [`Model::parameters`] order.
    pub fn collect_grads(&self, tape: &Tape, bound: &[LayerTensors]) -> Vec<Matrix> {
        bound
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(std::iter::once(l.bias)).chain(l.attn))
            .map(|t| {
                tape.grad(t).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.shape(t);
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &[LayerTensors],
        x: Features<'_>,
        ctx: &GraphContext,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        match cfg.kind {
            ModelKind::Mlp => mlp_forward(tape, x, bound, cfg, training, rng),
            ModelKind::Gcn => gcn_forward(tape, x, &ctx.a_hat, bound, cfg, training, rng),
            ModelKind::Gat => gat_forward(tape, x, &ctx.attention_pattern, bound, cfg, training, rng),
            ModelKind::Appnp => appnp_forward(tape, x, &ctx.a_hat, bound, cfg, training, rng),
        }
    }

    /// Inference logits with dropout disabled.
    pub fn predict(&self, x: &Arc<CsrMatrix>, ctx: &GraphContext) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, Features::Sparse(x), ctx, false, &mut NoRng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Activations feeding the final layer, `n × hidden_dim`.
    pub fn hidden_embedding(&self, x: &Arc<CsrMatrix>, ctx: &GraphContext) -> Result<Matrix> {
        if self.config.n_layers < 2 {
            return Err(Error::input("hidden embeddings need a model with at least 2 layers"));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, Features::Sparse(x), ctx, false, &mut NoRng)?;
        let hidden = out.hidden.expect("multi-layer models expose a hidden layer");
        Ok(tape.value(hidden).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Model = serde_json::from_str(&text)?;
        model.config.validate()?;
        Ok(model)
    }
}

/// Random source for inference passes, where dropout never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("dropout is disabled at inference")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("dropout is disabled at inference")
    }

    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("dropout is disabled at inference")
    }

    fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("dropout is disabled at inference")
    }
}

fn check_layers(bound: &[LayerTensors], cfg: &ModelConfig) -> Result<()> {
    if bound.len() != cfg.n_layers {
        return Err(Error::shape(
            "forward",
            format!("{} layers bound for a {}-layer model", bound.len(), cfg.n_layers),
        ));
    }
    Ok(())
}

/// Dropout on the layer input followed by `input · W` (no bias).
fn project<R: Rng + ?Sized>(
    tape: &mut Tape,
    input: Features<'_>,
    weight: Tensor,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    match input {
        Features::Sparse(x) => {
            if x.n_cols() != tape.shape(weight).0 {
                return Err(Error::shape(
                    "project",
                    format!("{} features vs weight {:?}", x.n_cols(), tape.shape(weight)),
                ));
            }
            if training && rate > 0.0 {
                let dropped = Arc::new(x.dropout_values(rate, rng));
                tape.spmm(&dropped, weight)
            } else {
                tape.spmm(x, weight)
            }
        }
        Features::Dense(h) => {
            let h = tape.dropout(h, rate, training, rng)?;
            tape.matmul(h, weight)
        }
    }
}

fn stack<R, F>(
    tape: &mut Tape,
    x: Features<'_>,
    bound: &[LayerTensors],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
    mut aggregate: F,
) -> Result<ForwardOutput>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape, Tensor, &LayerTensors) -> Result<Tensor>,
{
    check_layers(bound, cfg)?;
    let mut input = x;
    let mut hidden = None;
    let last = bound.len() - 1;
    for (l, layer) in bound.iter().enumerate() {
        let projected = project(tape, input, layer.weight, cfg.dropout, training, rng)?;
        let aggregated = aggregate(tape, projected, layer)?;
        let out = tape.add_row(aggregated, layer.bias)?;
        if l == last {
            return Ok(ForwardOutput { logits: out, hidden });
        }
        let activated = tape.relu(out)?;
        hidden = Some(activated);
        input = Features::Dense(activated);
    }
    unreachable!("n_layers >= 1")
}

/// Fully connected stack: `H ← σ(H W + b)`.
pub fn mlp_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Features<'_>,
    bound: &[LayerTensors],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    stack(tape, x, bound, cfg, training, rng, |_, h, _| Ok(h))
}

/// Graph convolution stack: `H ← σ(Â H W + b)`.
pub fn gcn_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Features<'_>,
    a_hat: &NormalizedAdjacency,
    bound: &[LayerTensors],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let a = a_hat.shared();
    if let Features::Dense(t) = x {
        if tape.shape(t).0 != a.n_rows() {
            return Err(Error::shape("gcn_forward", "feature rows differ from node count"));
        }
    }
    stack(tape, x, bound, cfg, training, rng, |tape, h, _| tape.spmm(&a, h))
}

/// Single-head graph attention stack.
///
/// For each node `v`, `h_v ← σ(Σ_{u∈Ñ(v)} α_vu W h_u + b)` where `α_v·` is the
/// softmax over `Ñ(v)` of `LeakyReLU(aᵀ[W h_v ‖ W h_u])`. The concatenated
/// score splits into `a_srcᵀ W h_v + a_dstᵀ W h_u`, so only per-node scores
/// and per-edge sums are materialized.
pub fn gat_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Features<'_>,
    pattern: &Arc<CsrMatrix>,
    bound: &[LayerTensors],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let slope = cfg.leaky_slope;
    stack(tape, x, bound, cfg, training, rng, |tape, wh, layer| {
        let attn = layer
            .attn
            .ok_or_else(|| Error::input("GAT layer is missing its attention vector"))?;
        let weights = gat_attention(tape, wh, attn, pattern, slope)?;
        tape.edge_aggregate(weights, wh, pattern)
    })
}

/// Attention coefficients `α` for every stored entry of `pattern`, as an
/// `nnz × 1` column.
pub fn gat_attention(
    tape: &mut Tape,
    wh: Tensor,
    attn: Tensor,
    pattern: &Arc<CsrMatrix>,
    slope: f64,
) -> Result<Tensor> {
    let d = tape.shape(wh).1;
    if tape.shape(attn) != (2 * d, 1) {
        return Err(Error::shape(
            "gat_attention",
            format!("attention {:?} for {d}-dim features", tape.shape(attn)),
        ));
    }
    let a_src = tape.slice_rows(attn, 0, d)?;
    let a_dst = tape.slice_rows(attn, d, d)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let scores = tape.edge_scores(s_src, s_dst, pattern)?;
    let scores = tape.leaky_relu(scores, slope)?;
    tape.edge_softmax(scores, pattern)
}

/// MLP predictions `H` followed by `K` steps of
/// `Z ← (1 − α) Â Z + α H`, starting from `Z = H`.
pub fn appnp_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Features<'_>,
    a_hat: &NormalizedAdjacency,
    bound: &[LayerTensors],
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let mlp = mlp_forward(tape, x, bound, cfg, training, rng)?;
    let h = mlp.logits;
    if tape.shape(h).0 != a_hat.n_nodes() {
        return Err(Error::shape("appnp_forward", "prediction rows differ from node count"));
    }
    let alpha = cfg.appnp_alpha;
    let a = a_hat.shared();
    let teleport = tape.scale(h, alpha)?;
    let mut z = h;
    for _ in 0..cfg.appnp_k {
        let propagated = tape.spmm(&a, z)?;
        let propagated = tape.scale(propagated, 1.0 - alpha)?;
        z = tape.add(propagated, teleport)?;
    }
    Ok(ForwardOutput {
        logits: z,
        hidden: mlp.hidden,
    })
}
