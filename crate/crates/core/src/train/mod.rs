//! Joint optimisation, early stopping and the pretrain-then-freeze schedule.

mod losses;
mod optim;
mod sampler;

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::config::Config;
use crate::dataio::{sample_training_subsequence, Modality, ModalityFeatures, Phase, SplitView};
use crate::embed::{EmbeddingVars, PropagatedEmbeddings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport, Scorer};
use crate::graphs::{
    build_bipartite, build_item_graph, denoised_adjacency, normalize_symmetric, SparseGraph,
};
use crate::model::{GraphScorer, Model, ModelContext, ModelVars, SequenceScorer, TripletBatch};
use crate::seqhead::{HeadRuntime, SequenceBatch, Token};

pub use crate::config::TrainConfig;
pub use losses::{bpr_loss, ce_loss, total_loss};
pub use optim::Adam;
pub use sampler::NegativeSampler;

/// Losses and validation metric of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub ce: f64,
    pub total: f64,
    pub valid_hr: f64,
}

/// Mean per-batch losses over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub bpr: f64,
    pub ce: f64,
    pub total: f64,
    pub steps: usize,
}

/// How ranking is computed during model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// `h_uᵀ h_i`
    Graph,
    /// Sequential head at the last position.
    Sequence,
}

/// What one training phase optimises.
#[derive(Debug, Clone)]
pub struct PhasePlan {
    pub train_graph_side: bool,
    pub train_head: bool,
    pub use_bpr: bool,
    /// Weight of the cross-entropy term; zero skips the head entirely.
    pub omega: f64,
    pub scoring: Scoring,
    /// Precomputed embeddings that replace the graph forward pass.
    pub fixed: Option<Arc<PropagatedEmbeddings>>,
}

/// A recorded step loss, ready for differentiation.
pub struct StepLoss {
    pub tape: Tape,
    pub vars: ModelVars,
    pub total: Var,
    pub bpr: f64,
    pub ce: f64,
}

impl StepLoss {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.total)
    }

    /// Gradient of every model tensor, in [`Model::named`] order.
    pub fn gradients(&self) -> Vec<Option<Mat>> {
        let grads = self.tape.backward(self.total);
        self.vars
            .flatten()
            .iter()
            .map(|&v| grads.get(v).cloned())
            .collect()
    }
}

/// Result of [`Experiment::fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochRecord>,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    /// Graph-side model after pretraining (variant S only).
    pub pretrained: Option<Model>,
}

/// Data, graphs and configuration of one training run.
pub struct Experiment {
    pub config: Config,
    pub split: SplitView,
    pub context: ModelContext,
    /// Unnormalised user-item adjacency from the training split.
    pub bipartite: SparseGraph,
    /// Normalised unpruned user-item graph used at inference.
    pub inference_graph: Arc<SparseGraph>,
    sampler: NegativeSampler,
}

impl Experiment {
    pub fn new(split: SplitView, features: Vec<ModalityFeatures>, config: Config) -> Result<Self> {
        config.validate()?;
        let variant = config.train.variant;
        let num_items = split.num_items;
        for f in &features {
            f.check_items(num_items)?;
        }
        let present: Vec<Modality> = features.iter().map(|f| f.modality).collect();
        let prop = variant.propagation();
        let weights = variant.modality_weights(&config.graphs.modality_weights()?);
        let active: Vec<Modality> = present
            .iter()
            .copied()
            .filter(|&m| weights.get(m) > 0.0)
            .collect();
        let item_graph = if prop.uses_item_graph() {
            if active.is_empty() {
                return Err(Error::Config(format!(
                    "variant {variant} needs features for a modality with non-zero weight"
                )));
            }
            let used: Vec<ModalityFeatures> = features
                .iter()
                .filter(|f| active.contains(&f.modality))
                .cloned()
                .collect();
            Some(Arc::new(
                build_item_graph(&used, config.graphs.knn_k, &weights)?.combined,
            ))
        } else {
            None
        };
        let bipartite = build_bipartite(&split.train, num_items)?;
        let inference_graph = Arc::new(normalize_symmetric(&bipartite));
        let runtime = HeadRuntime::new(config.head.clone(), config.graphs.embedding_dim)?;
        let context = ModelContext {
            num_users: split.num_users(),
            num_items,
            variant,
            item_layers: config.graphs.item_layers,
            user_layers: config.graphs.user_layers,
            item_graph,
            loss_modalities: active,
            features,
            runtime,
        };
        let sampler = NegativeSampler::new(&split.train, num_items);
        Ok(Self {
            config,
            split,
            context,
            bipartite,
            inference_graph,
            sampler,
        })
    }

    pub fn init_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Model {
        Model::init(
            self.context.num_users,
            self.context.num_items,
            &self.context.features,
            &self.context.runtime,
            rng,
        )
    }

    fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            exclude_history: self.config.train.exclude_history,
            ..EvalOptions::default()
        }
    }

    fn user_graph_for_inference(&self) -> Option<Arc<SparseGraph>> {
        self.context
            .variant
            .propagation()
            .uses_user_graph()
            .then(|| self.inference_graph.clone())
    }

    /// Embeddings on the unpruned user-item graph.
    pub fn inference_embeddings(&self, model: &Model) -> Result<PropagatedEmbeddings> {
        self.context
            .inference_embeddings(model, self.user_graph_for_inference())
    }

    pub fn evaluate(
        &self,
        model: &Model,
        scoring: Scoring,
        fixed: Option<&PropagatedEmbeddings>,
        phase: Phase,
    ) -> Result<MetricsReport> {
        let owned;
        let emb = match fixed {
            Some(e) => e,
            None => {
                owned = self.inference_embeddings(model)?;
                &owned
            }
        };
        let seq;
        let graph;
        let scorer: &dyn Scorer = match scoring {
            Scoring::Sequence => {
                seq = SequenceScorer {
                    context: &self.context,
                    head: &model.head,
                    embeddings: emb,
                };
                &seq
            }
            Scoring::Graph => {
                graph = GraphScorer { embeddings: emb };
                &graph
            }
        };
        evaluate(
            scorer,
            &self.split,
            phase,
            &self.config.train.eval_ks,
            &self.eval_options(),
        )
    }

    /// Default plan for the configured variant (phase 2 of S is built by [`Experiment::fit`]).
    pub fn primary_plan(&self) -> PhasePlan {
        let v = self.context.variant;
        if v.pretrain {
            PhasePlan {
                train_graph_side: true,
                train_head: false,
                use_bpr: true,
                omega: 0.0,
                scoring: Scoring::Graph,
                fixed: None,
            }
        } else {
            PhasePlan {
                train_graph_side: true,
                train_head: true,
                use_bpr: !v.no_mm_loss,
                omega: self.config.train.omega,
                scoring: Scoring::Sequence,
                fixed: None,
            }
        }
    }

    fn triples<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<(usize, usize, usize)>> {
        let mut out = Vec::new();
        for (u, items) in self.split.train.iter().enumerate() {
            let mut pos = items.clone();
            pos.sort_unstable();
            pos.dedup();
            for i in pos {
                out.push((u, i, self.sampler.sample(u, rng)?));
            }
        }
        out.shuffle(rng);
        Ok(out)
    }

    fn ce_samples<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<(Vec<Token>, usize)>> {
        let mut users: Vec<usize> = (0..self.split.num_users()).collect();
        users.shuffle(rng);
        let mut out = Vec::with_capacity(users.len());
        for u in users {
            if let Some((prefix, target)) = sample_training_subsequence(&self.split.train[u], rng) {
                out.push((self.context.assemble(u, prefix)?, target));
            }
        }
        Ok(out)
    }

    /// Loss of one optimiser step: mean BPR over `triples` plus `ω` times the
    /// mean cross-entropy over `sequences`. Dropout is active only when
    /// `dropout_rng` is given.
    pub fn step_loss<R: Rng + ?Sized>(
        &self,
        model: &Model,
        plan: &PhasePlan,
        user_graph: Option<Arc<SparseGraph>>,
        triples: &[(usize, usize, usize)],
        sequences: &[(Vec<Token>, usize)],
        dropout_rng: Option<&mut R>,
    ) -> Result<StepLoss> {
        let ctx = &self.context;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, plan.train_graph_side, plan.train_head);
        let emb = match &plan.fixed {
            Some(f) => EmbeddingVars {
                users: tape.constant(f.users.clone()),
                items: tape.constant(f.items.clone()),
                user_item: None,
                item_item: None,
            },
            None => ctx.embeddings_on_tape(&mut tape, &vars, user_graph)?,
        };
        let mut total: Option<Var> = None;
        let (mut bpr, mut ce) = (0.0, 0.0);
        if !triples.is_empty() {
            let batch = TripletBatch {
                users: triples.iter().map(|t| t.0).collect(),
                positives: triples.iter().map(|t| t.1).collect(),
                negatives: triples.iter().map(|t| t.2).collect(),
            };
            let sum = ctx.bpr_on_tape(&mut tape, &vars, &emb, &batch, self.config.train.lambda)?;
            let mean = tape.scale(sum, 1.0 / triples.len() as f64);
            bpr = tape.scalar(mean);
            total = Some(mean);
        }
        if !sequences.is_empty() {
            let seqs: Vec<Vec<Token>> = sequences.iter().map(|c| c.0.clone()).collect();
            let targets: Vec<usize> = sequences.iter().map(|c| c.1).collect();
            let batch = SequenceBatch::new(&seqs, ctx.runtime.config.max_len)?;
            let logits = ctx.logits_on_tape(&mut tape, &vars, &emb, &batch, dropout_rng)?;
            let sum = tape.cross_entropy_sum(logits, targets);
            let mean = tape.scale(sum, 1.0 / sequences.len() as f64);
            ce = tape.scalar(mean);
            let weighted = tape.scale(mean, plan.omega);
            total = Some(match total {
                Some(t) => tape.add(t, weighted),
                None => weighted,
            });
        }
        let total = total
            .ok_or_else(|| Error::Precondition("empty step: no triples and no sequences".into()))?;
        Ok(StepLoss {
            tape,
            vars,
            total,
            bpr,
            ce,
        })
    }

    /// One pass over the training data: re-prune, then step through batches.
    pub fn train_epoch<R: Rng + ?Sized>(
        &self,
        model: &mut Model,
        adam: &mut Adam,
        plan: &PhasePlan,
        epoch: usize,
        rng: &mut R,
    ) -> Result<EpochLosses> {
        let ctx = &self.context;
        let cfg = &self.config.train;
        let user_graph = if plan.fixed.is_none() && ctx.variant.propagation().uses_user_graph() {
            Some(Arc::new(denoised_adjacency(
                &self.bipartite,
                self.config.graphs.keep_fraction,
                rng,
            )?))
        } else {
            None
        };
        let triples = if plan.use_bpr {
            self.triples(rng)?
        } else {
            Vec::new()
        };
        let sequences = if plan.omega > 0.0 {
            self.ce_samples(rng)?
        } else {
            Vec::new()
        };
        let bpr_chunks: Vec<&[(usize, usize, usize)]> = triples.chunks(cfg.bpr_batch).collect();
        let ce_chunks: Vec<&[(Vec<Token>, usize)]> = sequences.chunks(cfg.ce_batch).collect();
        let steps = bpr_chunks.len().max(ce_chunks.len());
        if steps == 0 {
            return Err(Error::Precondition(
                "no training signal: no triples and no sequences".into(),
            ));
        }

        let mut acc = EpochLosses::default();
        for step in 0..steps {
            let bpr = bpr_chunks.get(step).copied().unwrap_or(&[]);
            let ce = ce_chunks.get(step).copied().unwrap_or(&[]);
            let loss = self.step_loss(model, plan, user_graph.clone(), bpr, ce, Some(&mut *rng))?;
            let total_value = loss.tape.scalar(loss.total);
            if !total_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    bpr: loss.bpr,
                    ce: loss.ce,
                });
            }
            let grads = loss.gradients();
            let grad_refs: Vec<Option<&Mat>> = grads.iter().map(Option::as_ref).collect();
            let params: Vec<&mut Mat> = model.named_mut().into_iter().map(|(_, m)| m).collect();
            adam.step(params, &grad_refs);

            acc.bpr += loss.bpr;
            acc.ce += loss.ce;
            acc.total += total_value;
            acc.steps += 1;
        }
        let n = acc.steps as f64;
        Ok(EpochLosses {
            bpr: acc.bpr / n,
            ce: acc.ce / n,
            total: acc.total / n,
            steps: acc.steps,
        })
    }

    /// Train with early stopping on validation HR@`select_k` (ties broken by NDCG).
    fn run_phase<R: Rng + ?Sized>(
        &self,
        model: Model,
        plan: &PhasePlan,
        epoch_offset: usize,
        rng: &mut R,
        sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<(Model, usize, usize)> {
        let cfg = &self.config.train;
        let k = cfg.select_k;
        let mut model = model;
        let mut adam = Adam::new(cfg.learning_rate, model.named().len());
        let mut best = model.clone();
        let mut best_epoch = 0;
        let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut epochs_run = 0;
        if cfg.max_epochs == 0 {
            return Ok((model, 0, 0));
        }
        for epoch in 1..=cfg.max_epochs {
            let losses =
                self.train_epoch(&mut model, &mut adam, plan, epoch_offset + epoch, rng)?;
            let report =
                self.evaluate(&model, plan.scoring, plan.fixed.as_deref(), Phase::Valid)?;
            let key = (report.hr(k), report.ndcg(k));
            epochs_run = epoch;
            sink(&EpochRecord {
                epoch: epoch_offset + epoch,
                bpr: losses.bpr,
                ce: losses.ce,
                total: losses.total,
                valid_hr: key.0,
            })?;
            if key > best_key {
                best_key = key;
                best_epoch = epoch;
                best = model.clone();
            } else if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
        Ok((best, best_epoch, epochs_run))
    }

    /// Full training run from the configured seed.
    pub fn fit(&self, sink: &mut dyn FnMut(&EpochRecord) -> Result<()>) -> Result<FitOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        let model = self.init_model(&mut rng);
        self.fit_from(model, &mut rng, sink)
    }

    pub fn fit_from<R: Rng + ?Sized>(
        &self,
        model: Model,
        rng: &mut R,
        sink: &mut dyn FnMut(&EpochRecord) -> Result<()>,
    ) -> Result<FitOutcome> {
        let mut history = Vec::new();
        let mut record = |r: &EpochRecord| {
            history.push(*r);
            sink(r)
        };
        let plan = self.primary_plan();
        let (model, best_epoch, epochs_run, pretrained, fixed) = if self.context.variant.pretrain {
            let (pre, best1, run1) = self.run_phase(model, &plan, 0, rng, &mut record)?;
            let fixed = Arc::new(self.inference_embeddings(&pre)?);
            let plan2 = PhasePlan {
                train_graph_side: false,
                train_head: true,
                use_bpr: false,
                omega: 1.0,
                scoring: Scoring::Sequence,
                fixed: Some(fixed.clone()),
            };
            let (post, best2, run2) =
                self.run_phase(pre.clone(), &plan2, run1, rng, &mut record)?;
            let best = if best2 == 0 { best1 } else { run1 + best2 };
            (post, best, run1 + run2, Some(pre), Some(fixed))
        } else {
            let (m, b, r) = self.run_phase(model, &plan, 0, rng, &mut record)?;
            (m, b, r, None, None)
        };
        let valid = self.evaluate(&model, Scoring::Sequence, fixed.as_deref(), Phase::Valid)?;
        let test = self.evaluate(&model, Scoring::Sequence, fixed.as_deref(), Phase::Test)?;
        Ok(FitOutcome {
            model,
            best_epoch,
            epochs_run,
            history,
            valid,
            test,
            pretrained,
        })
    }
}

/// CSV epoch log: `epoch,L_bpr,L_ce,L_total,valid_HR@k`.
pub struct EpochLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> EpochLog<W> {
    pub fn new(inner: W, select_k: usize) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record([
            "epoch",
            "L_bpr",
            "L_ce",
            "L_total",
            &format!("valid_HR@{select_k}"),
        ])?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<()> {
        self.writer.write_record([
            r.epoch.to_string(),
            r.bpr.to_string(),
            r.ce.to_string(),
            r.total.to_string(),
            r.valid_hr.to_string(),
        ])?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::from(e.into_error()))
    }
}
