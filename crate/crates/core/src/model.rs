//! Parameters, variants and the shared forward pass.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::dataio::{full_sequence_for_eval, Modality, ModalityFeatures, Phase, SplitView};
use crate::embed::{
    embed_on_tape, feature_rows, project_on_tape, EmbeddingTables, EmbeddingVars, GraphInputs,
    ModalityProjection, PropagatedEmbeddings, Propagation,
};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::graphs::{ModalityWeights, SparseGraph};
use crate::seqhead::{assemble_sequence, HeadParams, HeadRuntime, HeadVars, SequenceBatch, Token};

/// Which graphs and modalities feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Full,
    /// No graphs.
    Base,
    /// Item-item graph only.
    ItemGraph,
    /// User-item graph only.
    InteractionGraph,
    VisualOnly,
    TextOnly,
}

/// A variant tag or a combination such as `U,NO_MM_LOSS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub architecture: Architecture,
    pub user_token: bool,
    pub pretrain: bool,
    pub no_mm_loss: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        architecture: Architecture::Full,
        user_token: false,
        pretrain: false,
        no_mm_loss: false,
    };

    /// The eight variants of the ablation suite.
    pub fn ablation_set() -> Vec<Variant> {
        ["B", "M", "I", "V", "T", "FULL", "S", "U"]
            .iter()
            .map(|t| t.parse().expect("built-in tag"))
            .collect()
    }

    pub fn propagation(&self) -> Propagation {
        match self.architecture {
            Architecture::Base => Propagation::None,
            Architecture::ItemGraph => Propagation::ItemItem,
            Architecture::InteractionGraph => Propagation::UserItem,
            Architecture::Full | Architecture::VisualOnly | Architecture::TextOnly => {
                Propagation::Both
            }
        }
    }

    /// Modality weights after applying a one-hot restriction.
    pub fn modality_weights(&self, configured: &ModalityWeights) -> ModalityWeights {
        match self.architecture {
            Architecture::VisualOnly => ModalityWeights::only(Modality::Visual),
            Architecture::TextOnly => ModalityWeights::only(Modality::Text),
            _ => configured.clone(),
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant::FULL;
        let mut arch: Option<Architecture> = None;
        for tag in s.split([',', '+']).map(str::trim).filter(|t| !t.is_empty()) {
            let a = match tag.to_ascii_uppercase().as_str() {
                "FULL" => Some(Architecture::Full),
                "B" => Some(Architecture::Base),
                "M" => Some(Architecture::ItemGraph),
                "I" => Some(Architecture::InteractionGraph),
                "V" => Some(Architecture::VisualOnly),
                "T" => Some(Architecture::TextOnly),
                "U" => {
                    v.user_token = true;
                    None
                }
                "S" => {
                    v.pretrain = true;
                    None
                }
                "NO_MM_LOSS" => {
                    v.no_mm_loss = true;
                    None
                }
                _ => return Err(Error::UnknownVariant(tag.to_string())),
            };
            if let Some(a) = a {
                if arch.is_some_and(|prev| prev != a) {
                    return Err(Error::UnknownVariant(format!(
                        "{s} (more than one architecture tag)"
                    )));
                }
                arch = Some(a);
            }
        }
        if s.trim().is_empty() {
            return Err(Error::UnknownVariant(String::new()));
        }
        v.architecture = arch.unwrap_or(Architecture::Full);
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tags: Vec<&str> = Vec::new();
        match self.architecture {
            Architecture::Full => {}
            Architecture::Base => tags.push("B"),
            Architecture::ItemGraph => tags.push("M"),
            Architecture::InteractionGraph => tags.push("I"),
            Architecture::VisualOnly => tags.push("V"),
            Architecture::TextOnly => tags.push("T"),
        }
        if self.user_token {
            tags.push("U");
        }
        if self.pretrain {
            tags.push("S");
        }
        if self.no_mm_loss {
            tags.push("NO_MM_LOSS");
        }
        if tags.is_empty() {
            tags.push("FULL");
        }
        f.write_str(&tags.join(","))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// All trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub tables: EmbeddingTables,
    pub projections: Vec<ModalityProjection>,
    pub head: HeadParams,
}

/// Tape handles mirroring [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub user_table: Var,
    pub item_table: Var,
    /// `(modality, weight, bias)`
    pub projections: Vec<(Modality, Var, Var)>,
    pub head: HeadVars,
}

impl ModelVars {
    /// Same order as [`Model::named`].
    pub fn flatten(&self) -> Vec<Var> {
        let mut out = vec![self.user_table, self.item_table];
        out.extend(self.projections.iter().flat_map(|&(_, w, b)| [w, b]));
        out.extend(self.head.flatten());
        out
    }
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        num_users: usize,
        num_items: usize,
        features: &[ModalityFeatures],
        runtime: &HeadRuntime,
        rng: &mut R,
    ) -> Self {
        let dim = runtime.dim;
        let tables = EmbeddingTables::xavier(num_users, num_items, dim, rng);
        let projections = features
            .iter()
            .map(|f| ModalityProjection::xavier(f.modality, f.dim(), dim, rng))
            .collect();
        let head = HeadParams::xavier(&runtime.config, dim, rng);
        Self {
            tables,
            projections,
            head,
        }
    }

    /// Tensors with checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("user_table".to_string(), &self.tables.user_table),
            ("item_table".to_string(), &self.tables.item_table),
        ];
        for p in &self.projections {
            out.push((format!("proj.{}.weight", p.modality), &p.weight));
            out.push((format!("proj.{}.bias", p.modality), &p.bias));
        }
        out.extend(self.head.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("user_table".to_string(), &mut self.tables.user_table),
            ("item_table".to_string(), &mut self.tables.item_table),
        ];
        for p in &mut self.projections {
            let m = p.modality;
            out.push((format!("proj.{m}.weight"), &mut p.weight));
            out.push((format!("proj.{m}.bias"), &mut p.bias));
        }
        out.extend(self.head.named_mut());
        out
    }

    /// Whether a tensor belongs to the graph side (everything upstream of the head).
    pub fn is_graph_side(name: &str) -> bool {
        name == "user_table" || name == "item_table" || name.starts_with("proj.")
    }

    pub fn bind(&self, tape: &mut Tape, train_graph_side: bool, train_head: bool) -> ModelVars {
        ModelVars {
            user_table: tape.leaf(self.tables.user_table.clone(), train_graph_side),
            item_table: tape.leaf(self.tables.item_table.clone(), train_graph_side),
            projections: self
                .projections
                .iter()
                .map(|p| {
                    (
                        p.modality,
                        tape.leaf(p.weight.clone(), train_graph_side),
                        tape.leaf(p.bias.clone(), train_graph_side),
                    )
                })
                .collect(),
            head: self.head.bind(tape, train_head),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Fixed inputs shared by every forward pass of one experiment.
#[derive(Clone)]
pub struct ModelContext {
    pub num_users: usize,
    pub num_items: usize,
    pub variant: Variant,
    pub item_layers: usize,
    pub user_layers: usize,
    /// Frozen normalised item-item graph (absent when the variant ignores it).
    pub item_graph: Option<Arc<SparseGraph>>,
    /// Modalities entering the per-modality ranking term.
    pub loss_modalities: Vec<Modality>,
    pub features: Vec<ModalityFeatures>,
    pub runtime: HeadRuntime,
}

/// One `(user, positive, negative)` triple per row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

impl ModelContext {
    pub fn graph_inputs(&self, user_graph: Option<Arc<SparseGraph>>) -> GraphInputs {
        GraphInputs {
            mode: self.variant.propagation(),
            item_graph: self.item_graph.clone(),
            user_graph,
            item_layers: self.item_layers,
            user_layers: self.user_layers,
        }
    }

    pub fn embeddings_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        user_graph: Option<Arc<SparseGraph>>,
    ) -> Result<EmbeddingVars> {
        embed_on_tape(
            tape,
            &self.graph_inputs(user_graph),
            vars.user_table,
            vars.item_table,
        )
    }

    /// Summed BPR loss including the `λ`-weighted per-modality terms.
    pub fn bpr_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        emb: &EmbeddingVars,
        batch: &TripletBatch,
        lambda: f64,
    ) -> Result<Var> {
        let hu = tape.gather(emb.users, batch.users.clone());
        let hi = tape.gather(emb.items, batch.positives.clone());
        let hj = tape.gather(emb.items, batch.negatives.clone());
        let mut loss = pairwise_term(tape, hu, hi, hj);
        if lambda > 0.0 {
            for &m in &self.loss_modalities {
                let feats = self
                    .features
                    .iter()
                    .find(|f| f.modality == m)
                    .ok_or_else(|| Error::Precondition(format!("no {m} features loaded")))?;
                let &(_, w, b) = vars
                    .projections
                    .iter()
                    .find(|p| p.0 == m)
                    .ok_or_else(|| Error::Precondition(format!("no {m} projection")))?;
                let pi = project_on_tape(tape, feature_rows(feats, &batch.positives), w, b)?;
                let pj = project_on_tape(tape, feature_rows(feats, &batch.negatives), w, b)?;
                let term = pairwise_term(tape, hu, pi, pj);
                let term = tape.scale(term, lambda);
                loss = tape.add(loss, term);
            }
        }
        Ok(loss)
    }

    /// Packed token rows for a batch.
    pub fn tokens_on_tape(
        &self,
        tape: &mut Tape,
        emb: &EmbeddingVars,
        batch: &SequenceBatch,
    ) -> Var {
        let rows = batch.source_rows(self.num_items);
        if batch.has_user_tokens() {
            let source = tape.vstack(emb.items, emb.users);
            tape.gather(source, rows)
        } else {
            tape.gather(emb.items, rows)
        }
    }

    /// Scores over the whole catalog at each sequence's last position.
    pub fn logits_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        emb: &EmbeddingVars,
        batch: &SequenceBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let tokens = self.tokens_on_tape(tape, emb, batch);
        let last = self
            .runtime
            .forward_on_tape(tape, &vars.head, tokens, batch, dropout_rng)?;
        Ok(tape.matmul_t(last, emb.items))
    }

    pub fn assemble(&self, user: usize, history: &[usize]) -> Result<Vec<Token>> {
        assemble_sequence(
            history,
            self.variant.user_token.then_some(user),
            self.runtime.config.max_len,
        )
    }

    /// Embeddings for inference with the given (usually unpruned) user-item graph.
    pub fn inference_embeddings(
        &self,
        model: &Model,
        user_graph: Option<Arc<SparseGraph>>,
    ) -> Result<PropagatedEmbeddings> {
        crate::embed::forward_embeddings(&model.tables, &self.graph_inputs(user_graph))
    }
}

/// `Σ −log σ(h_uᵀa − h_uᵀb)`
fn pairwise_term(tape: &mut Tape, hu: Var, a: Var, b: Var) -> Var {
    let pa = tape.row_dot(hu, a);
    let pb = tape.row_dot(hu, b);
    let margin = tape.sub(pa, pb);
    tape.neg_log_sigmoid_sum(margin)
}

/// Next-item scores from the sequential head over fixed embeddings.
pub struct SequenceScorer<'a> {
    pub context: &'a ModelContext,
    pub head: &'a HeadParams,
    pub embeddings: &'a PropagatedEmbeddings,
}

impl Scorer for SequenceScorer<'_> {
    fn score_users(&self, split: &SplitView, users: &[usize], phase: Phase) -> Result<Mat> {
        let ctx = self.context;
        let max_len = ctx.runtime.config.max_len;
        let seqs = users
            .iter()
            .map(|&u| ctx.assemble(u, &full_sequence_for_eval(split, u, phase, max_len)))
            .collect::<Result<Vec<_>>>()?;
        let batch = SequenceBatch::new(&seqs, max_len)?;
        let mut tape = Tape::new();
        let vars = self.head.bind(&mut tape, false);
        let emb = EmbeddingVars {
            users: tape.constant(self.embeddings.users.clone()),
            items: tape.constant(self.embeddings.items.clone()),
            user_item: None,
            item_item: None,
        };
        let tokens = ctx.tokens_on_tape(&mut tape, &emb, &batch);
        let last = ctx
            .runtime
            .forward_on_tape::<rand::rngs::ThreadRng>(&mut tape, &vars, tokens, &batch, None)?;
        Ok(tape.value(last).dot(&self.embeddings.items.t()))
    }
}

/// `h_uᵀ h_i` from the graph embeddings alone.
pub struct GraphScorer<'a> {
    pub embeddings: &'a PropagatedEmbeddings,
}

impl Scorer for GraphScorer<'_> {
    fn score_users(&self, _split: &SplitView, users: &[usize], _phase: Phase) -> Result<Mat> {
        let hu = self.embeddings.users.select(ndarray::Axis(0), users);
        Ok(hu.dot(&self.embeddings.items.t()))
    }
}
