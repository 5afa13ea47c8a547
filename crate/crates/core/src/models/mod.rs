//! Network families over the numeric core: the source-only predictor, the
//! single-encoder adversarial network, and the multi-branch variant.
//!
//! Every family is a [`ModelGraph`]: one or more encoder branches whose
//! outputs are concatenated into an embedding, a target head on that
//! embedding and, for adversarial models, a sigmoid domain head reached
//! through a per-branch gradient reversal.

pub mod checkpoint;
pub mod mmd;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    bce_loss, grl_backward, mse_loss, Activation, GrlCoefficient, LayerStack, LossOutput, Matrix,
    Mode, ParamSlot,
};
use crate::shift::BranchPlan;
pub use mmd::{mmd, mmd_with_bandwidth, MmdOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn output_activation(self) -> Activation {
        match self {
            TaskKind::Classification => Activation::Sigmoid,
            TaskKind::Regression => Activation::Identity,
        }
    }

    pub fn loss(self, predicted: &[f64], actual: &[f64]) -> Result<LossOutput> {
        match self {
            TaskKind::Classification => bce_loss(predicted, actual),
            TaskKind::Regression => mse_loss(predicted, actual),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Smartphone-sensing sizes: 128-128-64 source network.
    Wenet,
    /// Wearable energy-expenditure sizes: 64-32 source network.
    Weee,
}

/// Layer sizes, dropout rates and batch size for every network family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub source_hidden: Vec<usize>,
    pub source_dropout: Vec<f64>,
    pub encoder_hidden: Vec<usize>,
    pub encoder_dropout: Vec<f64>,
    pub target_head_hidden: Vec<usize>,
    pub domain_head_hidden: Vec<usize>,
    pub batch_size: usize,
}

impl ArchitectureSpec {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Wenet => ArchitectureSpec {
                source_hidden: vec![128, 128, 64],
                source_dropout: vec![0.5, 0.5, 0.2],
                encoder_hidden: vec![128, 64],
                encoder_dropout: vec![0.5, 0.2],
                target_head_hidden: vec![64, 32],
                domain_head_hidden: vec![64, 32],
                batch_size: 32,
            },
            Preset::Weee => ArchitectureSpec {
                source_hidden: vec![64, 32],
                source_dropout: vec![0.3, 0.2],
                encoder_hidden: vec![64, 32],
                encoder_dropout: vec![0.3, 0.2],
                target_head_hidden: vec![32],
                domain_head_hidden: vec![32, 16],
                batch_size: 16,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        let widths = self
            .source_hidden
            .iter()
            .chain(&self.encoder_hidden)
            .chain(&self.target_head_hidden)
            .chain(&self.domain_head_hidden);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        for (name, hidden, rates) in [
            ("source", &self.source_hidden, &self.source_dropout),
            ("encoder", &self.encoder_hidden, &self.encoder_dropout),
        ] {
            if rates.len() > hidden.len() {
                return Err(Error::Validation(format!(
                    "{name}: {} dropout rates for {} layers",
                    rates.len(),
                    hidden.len()
                )));
            }
            if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
                return Err(Error::Validation(format!("{name}: dropout rate outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Encoder sizes for one of `branches` branches: the final width is split
    /// evenly (rounded up).
    pub fn branch_encoder_hidden(&self, branches: usize) -> Vec<usize> {
        let mut hidden = self.encoder_hidden.clone();
        if let Some(last) = hidden.last_mut() {
            *last = last.div_ceil(branches.max(1));
        }
        hidden
    }
}

/// An architecture given either by preset name or by explicit sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchitectureChoice {
    Preset(Preset),
    Explicit(ArchitectureSpec),
}

impl ArchitectureChoice {
    pub fn resolve(&self) -> ArchitectureSpec {
        match self {
            ArchitectureChoice::Preset(p) => ArchitectureSpec::preset(*p),
            ArchitectureChoice::Explicit(spec) => spec.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderBranch {
    /// Input feature indices, ascending.
    pub features: Vec<usize>,
    pub encoder: LayerStack,
    /// Reversal coefficient applied to this branch's slice of the
    /// domain-head gradient.
    pub lambda: GrlCoefficient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelGraph {
    input_dim: usize,
    task: TaskKind,
    branches: Vec<EncoderBranch>,
    target_head: LayerStack,
    domain_head: Option<LayerStack>,
}

/// One optimization batch. Target rows are unlabeled by construction.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub source_x: &'a Matrix,
    pub source_y: &'a [f64],
    pub target_x: Option<&'a Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// Train the domain head (and reverse its gradient into the encoders).
    pub domain: bool,
    /// Weight of the MMD² penalty between source and target embeddings.
    pub mmd_weight: f64,
}

impl StepOptions {
    pub const TASK_ONLY: StepOptions = StepOptions {
        domain: false,
        mmd_weight: 0.0,
    };
    pub const ADVERSARIAL: StepOptions = StepOptions {
        domain: true,
        mmd_weight: 0.0,
    };
}

/// Cached outputs of [`ModelGraph::forward_step`], consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub n_source: usize,
    pub n_target: usize,
    pub embedding: Matrix,
    pub task: LossOutput,
    pub domain: Option<LossOutput>,
    pub mmd: Option<MmdOutput>,
    pub mmd_weight: f64,
}

impl StepForward {
    pub fn domain_loss(&self) -> Option<f64> {
        self.domain.as_ref().map(|d| d.loss)
    }

    pub fn mmd_value(&self) -> Option<f64> {
        self.mmd.as_ref().map(|m| m.value)
    }
}

fn column(values: &[f64]) -> Matrix {
    Matrix::column(values)
}

impl ModelGraph {
    pub fn new(
        input_dim: usize,
        task: TaskKind,
        branches: Vec<EncoderBranch>,
        target_head: LayerStack,
        domain_head: Option<LayerStack>,
    ) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Validation("model needs at least one encoder branch".into()));
        }
        let mut owner = vec![false; input_dim];
        for b in &branches {
            if b.features.len() != b.encoder.input_dim() {
                return Err(Error::Shape(format!(
                    "branch over {} features has an encoder for {}",
                    b.features.len(),
                    b.encoder.input_dim()
                )));
            }
            for &f in &b.features {
                match owner.get_mut(f) {
                    Some(seen @ false) => *seen = true,
                    Some(true) => {
                        return Err(Error::Validation(format!(
                            "feature {f} feeds more than one branch"
                        )))
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "feature {f} outside input dimension {input_dim}"
                        )))
                    }
                }
            }
        }
        if owner.iter().any(|o| !o) {
            return Err(Error::Validation("branches do not cover every input feature".into()));
        }
        let width: usize = branches.iter().map(|b| b.encoder.output_dim()).sum();
        if target_head.input_dim() != width {
            return Err(Error::Shape(format!(
                "target head expects {} inputs, embedding has {width}",
                target_head.input_dim()
            )));
        }
        if target_head.output_dim() != 1 {
            return Err(Error::Shape("target head must have one output".into()));
        }
        if let Some(d) = &domain_head {
            if d.input_dim() != width || d.output_dim() != 1 {
                return Err(Error::Shape(format!(
                    "domain head {}→{} does not fit embedding width {width}",
                    d.input_dim(),
                    d.output_dim()
                )));
            }
        }
        Ok(ModelGraph {
            input_dim,
            task,
            branches,
            target_head,
            domain_head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn embedding_dim(&self) -> usize {
        self.branches.iter().map(|b| b.encoder.output_dim()).sum()
    }

    pub fn branches(&self) -> &[EncoderBranch] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [EncoderBranch] {
        &mut self.branches
    }

    pub fn target_head(&self) -> &LayerStack {
        &self.target_head
    }

    pub fn target_head_mut(&mut self) -> &mut LayerStack {
        &mut self.target_head
    }

    pub fn domain_head(&self) -> Option<&LayerStack> {
        self.domain_head.as_ref()
    }

    pub fn domain_head_mut(&mut self) -> Option<&mut LayerStack> {
        self.domain_head.as_mut()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.lambda.value()).collect()
    }

    pub fn set_lambdas(&mut self, lambdas: &[f64]) -> Result<()> {
        if lambdas.len() != self.branches.len() {
            return Err(Error::Validation(format!(
                "{} coefficients for {} branches",
                lambdas.len(),
                self.branches.len()
            )));
        }
        let coeffs = lambdas
            .iter()
            .map(|&l| GrlCoefficient::new(l))
            .collect::<Result<Vec<_>>>()?;
        for (b, c) in self.branches.iter_mut().zip(coeffs) {
            b.lambda = c;
        }
        Ok(())
    }

    /// Embedding for `x` in inference mode.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let parts = self
            .branches
            .iter()
            .map(|b| b.encoder.infer(&x.select_cols(&b.features)))
            .collect::<Result<Vec<_>>>()?;
        Matrix::hstack(&parts)
    }

    /// Target-head outputs (probabilities or regression values).
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.target_head.infer(&self.embed(x)?)?.into_data())
    }

    /// Domain-head probability that each row comes from the target domain.
    pub fn domain_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.domain_scores_from_embedding(&self.embed(x)?)
    }

    pub fn domain_scores_from_embedding(&self, embedding: &Matrix) -> Result<Vec<f64>> {
        let head = self
            .domain_head
            .as_ref()
            .ok_or_else(|| Error::State("model has no domain head".into()))?;
        Ok(head.infer(embedding)?.into_data())
    }

    fn encode<R: Rng + ?Sized>(&mut self, x: &Matrix, mode: Mode, rng: &mut R) -> Result<Matrix> {
        let mut parts = Vec::with_capacity(self.branches.len());
        for b in &mut self.branches {
            parts.push(b.encoder.forward(&x.select_cols(&b.features), mode, rng)?);
        }
        Matrix::hstack(&parts)
    }

    /// Forward pass over a batch, caching what the backward pass needs.
    /// Domain labels are 0 for source rows and 1 for target rows.
    pub fn forward_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch<'_>,
        opts: StepOptions,
        mode: Mode,
        rng: &mut R,
    ) -> Result<StepForward> {
        if batch.source_x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.input_dim,
                batch.source_x.cols()
            )));
        }
        let use_mmd = opts.mmd_weight != 0.0;
        if opts.domain && self.domain_head.is_none() {
            return Err(Error::State("domain step on a model without a domain head".into()));
        }
        let target = if opts.domain || use_mmd {
            Some(batch.target_x.ok_or_else(|| {
                Error::Validation("adaptation step needs a target batch".into())
            })?)
        } else {
            None
        };
        let n_source = batch.source_x.rows();
        let n_target = target.map_or(0, Matrix::rows);
        let input = match target {
            Some(t) => Matrix::vstack(batch.source_x, t)?,
            None => batch.source_x.clone(),
        };
        let embedding = self.encode(&input, mode, rng)?;
        let source_emb = embedding.row_range(0, n_source);
        let out = self.target_head.forward(&source_emb, mode, rng)?;
        let task = self.task.loss(out.data(), batch.source_y)?;

        let domain = if opts.domain {
            let head = self.domain_head.as_mut().expect("checked above");
            let scores = head.forward(&embedding, mode, rng)?;
            let labels: Vec<f64> = (0..n_source + n_target)
                .map(|i| if i < n_source { 0.0 } else { 1.0 })
                .collect();
            Some(bce_loss(scores.data(), &labels)?)
        } else {
            None
        };
        let mmd = if use_mmd {
            let target_emb = embedding.row_range(n_source, n_source + n_target);
            Some(mmd::mmd(&source_emb, &target_emb)?)
        } else {
            None
        };
        Ok(StepForward {
            n_source,
            n_target,
            embedding,
            task,
            domain,
            mmd,
            mmd_weight: opts.mmd_weight,
        })
    }

    /// Backpropagate the cached step. Encoder gradients are
    /// `∂task + β·∂MMD − λ_b·∂domain` per branch `b`; heads receive the plain
    /// gradients of their own losses.
    pub fn backward_step(&mut self, fwd: &StepForward) -> Result<()> {
        let width = self.embedding_dim();
        let rows = fwd.n_source + fwd.n_target;
        let mut g_emb = Matrix::zeros(rows, width);

        let g_task = self.target_head.backward(&column(&fwd.task.grad))?;
        for r in 0..fwd.n_source {
            g_emb.row_mut(r).copy_from_slice(g_task.row(r));
        }

        if let Some(dom) = &fwd.domain {
            let head = self
                .domain_head
                .as_mut()
                .ok_or_else(|| Error::State("domain gradient without a domain head".into()))?;
            let g_dom = head.backward(&column(&dom.grad))?;
            let mut offset = 0;
            for b in &self.branches {
                let w = b.encoder.output_dim();
                let reversed = grl_backward(b.lambda, &g_dom.col_range(offset, offset + w));
                for r in 0..rows {
                    let dst = &mut g_emb.row_mut(r)[offset..offset + w];
                    for (d, s) in dst.iter_mut().zip(reversed.row(r)) {
                        *d += s;
                    }
                }
                offset += w;
            }
        }

        if let Some(m) = &fwd.mmd {
            let beta = fwd.mmd_weight;
            for r in 0..fwd.n_source {
                for (d, s) in g_emb.row_mut(r).iter_mut().zip(m.grad_source.row(r)) {
                    *d += beta * s;
                }
            }
            for r in 0..fwd.n_target {
                let dst = g_emb.row_mut(fwd.n_source + r);
                for (d, s) in dst.iter_mut().zip(m.grad_target.row(r)) {
                    *d += beta * s;
                }
            }
        }

        let mut offset = 0;
        for b in &mut self.branches {
            let w = b.encoder.output_dim();
            b.encoder.backward(&g_emb.col_range(offset, offset + w))?;
            offset += w;
        }
        Ok(())
    }

    /// Parameters and gradients from the last backward pass. The domain head
    /// is included only when `with_domain` is set.
    pub fn param_slots(&mut self, with_domain: bool) -> Result<Vec<ParamSlot<'_>>> {
        let mut slots = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.encoder.param_slots(&format!("branch{i}"), &mut slots)?;
        }
        self.target_head.param_slots("target_head", &mut slots)?;
        if with_domain {
            let head = self
                .domain_head
                .as_mut()
                .ok_or_else(|| Error::State("model has no domain head".into()))?;
            head.param_slots("domain_head", &mut slots)?;
        }
        Ok(slots)
    }

    /// Flat parameter vector over all tensors (branches, target head, domain head).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.extend(b.encoder.flat_params());
        }
        out.extend(self.target_head.flat_params());
        if let Some(d) = &self.domain_head {
            out.extend(d.flat_params());
        }
        out
    }

    /// Every layer stack in parameter order.
    pub fn stacks_mut(&mut self) -> Vec<&mut LayerStack> {
        let mut out: Vec<&mut LayerStack> = self.branches.iter_mut().map(|b| &mut b.encoder).collect();
        out.push(&mut self.target_head);
        if let Some(d) = &mut self.domain_head {
            out.push(d);
        }
        out
    }

    /// Overwrite parameters from a vector laid out like [`Self::flat_params`].
    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.flat_params().len();
        if values.len() != total {
            return Err(Error::Shape(format!("{} values for {total} parameters", values.len())));
        }
        let mut it = values.iter();
        for s in self.stacks_mut() {
            for p in s.params_mut() {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        for b in &mut self.branches {
            b.encoder.clear();
        }
        self.target_head.clear();
        if let Some(d) = &mut self.domain_head {
            d.clear();
        }
    }
}

fn target_head<R: Rng + ?Sized>(
    spec: &ArchitectureSpec,
    task: TaskKind,
    width: usize,
    rng: &mut R,
) -> Result<LayerStack> {
    LayerStack::build(
        width,
        &spec.target_head_hidden,
        &[],
        Some((1, task.output_activation())),
        rng,
    )
}

fn domain_head<R: Rng + ?Sized>(spec: &ArchitectureSpec, width: usize, rng: &mut R) -> Result<LayerStack> {
    LayerStack::build(
        width,
        &spec.domain_head_hidden,
        &[],
        Some((1, Activation::Sigmoid)),
        rng,
    )
}

fn check_input(input_dim: usize) -> Result<()> {
    if input_dim == 0 {
        return Err(Error::Validation("input dimension must be positive".into()));
    }
    Ok(())
}

/// Source-only predictor: the source hidden stack followed by a single
/// output unit. No domain head.
pub fn build_source_model<R: Rng + ?Sized>(
    spec: &ArchitectureSpec,
    task: TaskKind,
    input_dim: usize,
    rng: &mut R,
) -> Result<ModelGraph> {
    check_input(input_dim)?;
    spec.validate()?;
    let encoder = LayerStack::build(input_dim, &spec.source_hidden, &spec.source_dropout, None, rng)?;
    let head = LayerStack::build(
        encoder.output_dim(),
        &[],
        &[],
        Some((1, task.output_activation())),
        rng,
    )?;
    ModelGraph::new(
        input_dim,
        task,
        vec![EncoderBranch {
            features: (0..input_dim).collect(),
            encoder,
            lambda: GrlCoefficient::one(),
        }],
        head,
        None,
    )
}

/// Single shared encoder with target and domain heads.
pub fn build_dann<R: Rng + ?Sized>(
    spec: &ArchitectureSpec,
    task: TaskKind,
    input_dim: usize,
    rng: &mut R,
) -> Result<ModelGraph> {
    check_input(input_dim)?;
    spec.validate()?;
    let encoder =
        LayerStack::build(input_dim, &spec.encoder_hidden, &spec.encoder_dropout, None, rng)?;
    let width = encoder.output_dim();
    let target = target_head(spec, task, width, rng)?;
    let domain = domain_head(spec, width, rng)?;
    ModelGraph::new(
        input_dim,
        task,
        vec![EncoderBranch {
            features: (0..input_dim).collect(),
            encoder,
            lambda: GrlCoefficient::one(),
        }],
        target,
        Some(domain),
    )
}

/// One encoder per planned branch; heads sized to the concatenated width.
pub fn build_multibranch<R: Rng + ?Sized>(
    plan: &BranchPlan,
    spec: &ArchitectureSpec,
    task: TaskKind,
    rng: &mut R,
) -> Result<ModelGraph> {
    spec.validate()?;
    let input_dim: usize = plan.branches.iter().map(|b| b.features.len()).sum();
    plan.validate(input_dim)?;
    let hidden = spec.branch_encoder_hidden(plan.branches.len());
    let mut branches = Vec::with_capacity(plan.branches.len());
    for b in &plan.branches {
        let encoder =
            LayerStack::build(b.features.len(), &hidden, &spec.encoder_dropout, None, rng)?;
        branches.push(EncoderBranch {
            features: b.features.clone(),
            encoder,
            lambda: GrlCoefficient::new(b.lambda)?,
        });
    }
    let width: usize = branches.iter().map(|b| b.encoder.output_dim()).sum();
    let target = target_head(spec, task, width, rng)?;
    let domain = domain_head(spec, width, rng)?;
    ModelGraph::new(input_dim, task, branches, target, Some(domain))
}
