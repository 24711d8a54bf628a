//! Input-independent pruning of encoder-output neurons.
//!
//! A [`PruneMask`] names columns of the `l × d_tok` latent that are forced to
//! zero for every document. Those coordinates carry no information about the
//! input, so they drop out of the sensitivity and receive no noise.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::latent::LatentVector;
use crate::model::tensor::Matrix;
use crate::model::train::{train_steps, LatentOptions, Optimizer, TrainConfig};
use crate::model::{ModelParams, TokenSequence};
use crate::clipping::ClipSpec;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pruned_indices: Vec<usize>,
    d_tok: usize,
}

impl PruneMask {
    /// Sorts `indices`; rejects duplicates and out-of-range entries.
    pub fn new(mut indices: Vec<usize>, d_tok: usize) -> Result<Self> {
        if d_tok == 0 {
            return invalid_arg("d_tok must be positive");
        }
        indices.sort_unstable();
        if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
            return invalid_arg(format!("neuron {} listed twice", w[0]));
        }
        if let Some(&j) = indices.last().filter(|&&j| j >= d_tok) {
            return invalid_arg(format!("neuron {j} is outside d_tok = {d_tok}"));
        }
        Ok(PruneMask {
            pruned_indices: indices,
            d_tok,
        })
    }

    pub fn empty(d_tok: usize) -> Self {
        PruneMask {
            pruned_indices: Vec::new(),
            d_tok,
        }
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn indices(&self) -> &[usize] {
        &self.pruned_indices
    }

    pub fn len(&self) -> usize {
        self.pruned_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pruned_indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.pruned_indices.binary_search(&j).is_ok()
    }

    /// Indices still alive, ascending.
    pub fn alive(&self) -> Vec<usize> {
        (0..self.d_tok).filter(|&j| !self.contains(j)).collect()
    }

    pub fn fraction(&self) -> f64 {
        self.len() as f64 / self.d_tok as f64
    }

    pub fn extend(&self, more: &[usize]) -> Result<Self> {
        let mut all = self.pruned_indices.clone();
        all.extend_from_slice(more);
        Self::new(all, self.d_tok)
    }

    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.d_tok == other.d_tok && self.pruned_indices.iter().all(|&j| other.contains(j))
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.d_tok {
            return invalid_arg(format!(
                "latent width {width} does not match mask d_tok {}",
                self.d_tok
            ));
        }
        Ok(())
    }
}

/// Zeroes every masked column of every token.
pub fn prune(z: &LatentVector, mask: &PruneMask) -> Result<LatentVector> {
    mask.check_width(z.width)?;
    let mut out = z.clone();
    for row in out.data.chunks_mut(z.width) {
        for &j in mask.indices() {
            row[j] = 0.0;
        }
    }
    Ok(out)
}

/// `(d_tok − |P|) · l`.
pub fn effective_dim(mask: &PruneMask, l: usize) -> usize {
    (mask.d_tok - mask.len()) * l
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub source: String,
}

/// Column absolute sums of a weight matrix whose column `j` reads neuron `j`.
pub fn neuron_importance(w: &Matrix, source: impl Into<String>) -> Result<ImportanceScores> {
    if w.is_empty() {
        return invalid_arg("cannot score an empty weight matrix");
    }
    let mut scores = vec![0.0; w.cols];
    for r in 0..w.rows {
        for (s, v) in scores.iter_mut().zip(w.row(r)) {
            *s += v.abs();
        }
    }
    Ok(ImportanceScores {
        scores,
        source: source.into(),
    })
}

/// Quantile with linear interpolation between order statistics
/// (position `q · (len − 1)` in the sorted values).
pub fn quantile_linear(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return invalid_arg("quantile of an empty set");
    }
    if !(0.0..=1.0).contains(&q) {
        return invalid_arg(format!("quantile must lie in [0, 1], got {q}"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Alive neurons scoring strictly below the `quantile` of the alive scores. At
/// least one neuron is always chosen: the lowest score, lowest index on ties.
pub fn select_prune_indices(scores: &ImportanceScores, already: &PruneMask, quantile: f64) -> Result<Vec<usize>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return invalid_arg(format!("quantile must lie in (0, 1), got {quantile}"));
    }
    if scores.scores.len() != already.d_tok {
        return invalid_arg(format!(
            "{} scores for a mask over {} neurons",
            scores.scores.len(),
            already.d_tok
        ));
    }
    let alive = already.alive();
    if alive.is_empty() {
        return Err(Error::InvalidState("every neuron is already pruned".into()));
    }
    let alive_scores: Vec<f64> = alive.iter().map(|&j| scores.scores[j]).collect();
    let threshold = quantile_linear(&alive_scores, quantile)?;
    let below: Vec<usize> = alive
        .iter()
        .copied()
        .filter(|&j| scores.scores[j] < threshold)
        .collect();
    if !below.is_empty() {
        return Ok(below);
    }
    let mut lowest = alive[0];
    for &j in &alive[1..] {
        if scores.scores[j] < scores.scores[lowest] {
            lowest = j;
        }
    }
    Ok(vec![lowest])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// Number of prune-then-retrain rounds `E`.
    pub total_iterations: usize,
    /// Number of mask extensions in the deployed mask: `0` deploys no pruning,
    /// `total_iterations` the mask the final weights were retrained under.
    pub use_iteration: usize,
    pub quantile: f64,
    pub retrain_steps: usize,
    pub retrain_clip_c: f64,
}

impl Default for PruneSchedule {
    /// Six rounds at the 25% quantile, deploying the fifth.
    fn default() -> Self {
        PruneSchedule {
            total_iterations: 6,
            use_iteration: 5,
            quantile: 0.25,
            retrain_steps: 200,
            retrain_clip_c: 0.2,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return invalid_arg("pruning needs at least one iteration");
        }
        if self.use_iteration > self.total_iterations {
            return invalid_arg(format!(
                "use_iteration {} is past the {} iterations",
                self.use_iteration, self.total_iterations
            ));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return invalid_arg(format!("quantile must lie in (0, 1), got {}", self.quantile));
        }
        ClipSpec::by_value(self.retrain_clip_c)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    /// Weights after the last round, frozen.
    pub params: ModelParams,
    /// Mask after each round; entry `i` is the mask in force during round `i`'s retraining.
    pub history: Vec<PruneMask>,
    pub deployed: PruneMask,
    /// Mean retraining loss of each round.
    pub losses: Vec<f64>,
}

/// Scores the first decoder layer's cross-attention key projection.
pub fn model_importance(params: &ModelParams) -> Result<ImportanceScores> {
    let w = params.first_cross_key_projection()?;
    neuron_importance(&w, "dec.0.cross.wk (attention width x d_tok)")
}

/// Alternates mask extension and retraining under pruning plus value clipping.
pub fn iterative_prune_train(
    model: &ModelParams,
    corpus: &[TokenSequence],
    schedule: &PruneSchedule,
    train: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<PruneOutcome> {
    schedule.validate()?;
    if corpus.is_empty() {
        return invalid_arg("pruning needs a nonempty public corpus");
    }
    if model.frozen {
        return Err(Error::InvalidState("cannot prune-train a frozen model".into()));
    }
    let mut params = model.clone();
    let mut mask = PruneMask::empty(params.config.d_tok);
    let mut history = Vec::with_capacity(schedule.total_iterations);
    let mut losses = Vec::with_capacity(schedule.total_iterations);
    let mut opt = Optimizer::new(train.optimizer.clone(), &params);
    let clip = ClipSpec::by_value(schedule.retrain_clip_c)?;
    for round in 0..schedule.total_iterations {
        let scores = model_importance(&params)?;
        let chosen = select_prune_indices(&scores, &mask, schedule.quantile)?;
        if chosen.len() >= mask.alive().len() {
            return Err(Error::InvalidState(format!(
                "round {round} would prune every remaining neuron"
            )));
        }
        mask = mask.extend(&chosen)?;
        log::info!(
            "prune round {round}: +{} neurons, {} of {} pruned",
            chosen.len(),
            mask.len(),
            mask.d_tok()
        );
        let options = LatentOptions {
            mask: Some(mask.clone()),
            clip: Some(clip),
            noise: None,
        };
        let loss = train_steps(&mut params, corpus, train, &mut opt, &options, schedule.retrain_steps, rng)?;
        losses.push(loss);
        history.push(mask.clone());
    }
    params.frozen = true;
    let deployed = match schedule.use_iteration {
        0 => PruneMask::empty(params.config.d_tok),
        k => history[k - 1].clone(),
    };
    Ok(PruneOutcome {
        params,
        history,
        deployed,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_run(schedule: &PruneSchedule) -> (ModelParams, PruneOutcome) {
        use crate::model::tests::seq;
        use crate::model::ModelConfig;
        use crate::rng::stream;
        let cfg = ModelConfig {
            max_len: 6,
            ..ModelConfig::transformer(12)
        };
        let model = ModelParams::init(&cfg, 5).unwrap();
        let corpus: Vec<TokenSequence> = (0..8).map(|i| seq(&[5 + i % 7, 6 + (i * 3) % 6], 6)).collect();
        let train = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = iterative_prune_train(&model, &corpus, schedule, &train, &mut stream(1, 2)).unwrap();
        (model, out)
    }

    #[test]
    fn single_round_deploys_nothing_at_use_zero() {
        let schedule = PruneSchedule {
            total_iterations: 1,
            use_iteration: 0,
            retrain_steps: 2,
            ..PruneSchedule::default()
        };
        let (model, out) = toy_run(&schedule);
        assert!(out.deployed.is_empty());
        assert_eq!(out.history.len(), 1);
        let s = model_importance(&model).unwrap();
        let t = quantile_linear(&s.scores, 0.25).unwrap();
        let below = s.scores.iter().filter(|&&v| v < t).count();
        assert_eq!(out.history[0].len(), below.max(1));
        assert!(out.params.frozen);
    }

    #[test]
    fn rounds_nest_and_the_deployed_mask_is_selected_by_count() {
        let schedule = PruneSchedule {
            retrain_steps: 2,
            ..PruneSchedule::default()
        };
        let (_, out) = toy_run(&schedule);
        assert_eq!(out.history.len(), 6);
        assert!(out.history.windows(2).all(|w| w[0].is_subset_of(&w[1]) && w[0].len() < w[1].len()));
        assert_eq!(out.deployed, out.history[4]);
        let (_, again) = toy_run(&schedule);
        assert_eq!(again.history, out.history);
        let bad = PruneSchedule {
            use_iteration: 7,
            ..schedule
        };
        assert!(bad.validate().is_err());
    }

    fn scores(v: &[f64]) -> ImportanceScores {
        ImportanceScores {
            scores: v.to_vec(),
            source: "test".into(),
        }
    }

    #[test]
    fn prune_zeroes_columns() {
        let z = LatentVector::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = PruneMask::new(vec![1], 3).unwrap();
        assert_eq!(prune(&z, &m).unwrap().data, vec![1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
        assert_eq!(prune(&z, &PruneMask::empty(3)).unwrap(), z);
        assert!(prune(&z, &PruneMask::empty(4)).is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(PruneMask::new(vec![1, 1], 3).is_err());
        assert!(PruneMask::new(vec![3], 3).is_err());
        assert_eq!(PruneMask::new(vec![2, 0], 3).unwrap().indices(), &[0, 2]);
        let m = PruneMask::new(vec![2, 0], 3).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"pruned_indices":[0,2],"d_tok":3}"#);
    }

    #[test]
    fn importance_is_column_abs_sum() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0]]);
        assert_eq!(neuron_importance(&w, "w").unwrap().scores, vec![1.5, 2.0]);
        assert_eq!(neuron_importance(&Matrix::zeros(3, 2), "w").unwrap().scores, vec![0.0, 0.0]);
        assert!(neuron_importance(&Matrix::zeros(0, 0), "w").is_err());
    }

    #[test]
    fn selection_examples() {
        let s = scores(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(quantile_linear(&s.scores, 0.25).unwrap(), 1.75);
        let first = select_prune_indices(&s, &PruneMask::empty(4), 0.25).unwrap();
        assert_eq!(first, vec![0]);
        let m = PruneMask::new(first, 4).unwrap();
        assert_eq!(select_prune_indices(&s, &m, 0.25).unwrap(), vec![1]);

        let flat = scores(&[2.0; 5]);
        let m = PruneMask::new(vec![0], 5).unwrap();
        assert_eq!(select_prune_indices(&flat, &m, 0.25).unwrap(), vec![1]);

        let full = PruneMask::new(vec![0, 1, 2, 3], 4).unwrap();
        assert!(matches!(select_prune_indices(&s, &full, 0.25), Err(Error::InvalidState(_))));
    }

    #[test]
    fn effective_dims() {
        let m = PruneMask::new((0..586).collect(), 768).unwrap();
        assert_eq!(effective_dim(&m, 20), 3640);
        assert_eq!(effective_dim(&PruneMask::empty(768), 20), 15360);
        assert_eq!(effective_dim(&PruneMask::new((0..24).collect(), 32).unwrap(), 20), 160);
    }

    /// Sorting-free reference: position `q(n-1)` found by counting.
    fn reference_quantile(v: &[f64], q: f64) -> f64 {
        let pos = q * (v.len() - 1) as f64;
        let rank = |k: usize| {
            let mut s = v.to_vec();
            for i in 0..=k {
                let m = (i..s.len()).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
                s.swap(i, m);
            }
            s[k]
        };
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        rank(lo) * (1.0 - (pos - lo as f64)) + rank(hi) * (pos - lo as f64)
    }

    proptest! {
        #[test]
        fn prune_is_idempotent_and_ignores_masked_values(
            data in prop::collection::vec(-3.0f64..3.0, 12),
            other in prop::collection::vec(-3.0f64..3.0, 12),
            idx in prop::collection::btree_set(0usize..4, 0..4),
        ) {
            let z = LatentVector::new(3, 4, data).unwrap();
            let m = PruneMask::new(idx.into_iter().collect(), 4).unwrap();
            let once = prune(&z, &m).unwrap();
            prop_assert_eq!(&prune(&once, &m).unwrap(), &once);
            let mut z2 = z.clone();
            for (t, row) in z2.data.chunks_mut(4).enumerate() {
                for &j in m.indices() {
                    row[j] = other[t * 4 + j];
                }
            }
            prop_assert_eq!(prune(&z2, &m).unwrap(), once);
        }

        #[test]
        fn selection_never_repeats_and_always_progresses(
            s in prop::collection::vec(0.0f64..10.0, 2..40),
            q in 0.05f64..0.95,
            seed_pruned in prop::collection::vec(any::<bool>(), 40),
        ) {
            let d = s.len();
            let pruned: Vec<usize> = (0..d - 1).filter(|&j| seed_pruned[j]).collect();
            let m = PruneMask::new(pruned, d).unwrap();
            let picked = select_prune_indices(&scores(&s), &m, q).unwrap();
            prop_assert!(!picked.is_empty());
            for j in &picked {
                prop_assert!(!m.contains(*j));
            }
            let alive: Vec<f64> = m.alive().iter().map(|&j| s[j]).collect();
            let t = reference_quantile(&alive, q);
            prop_assert!((quantile_linear(&alive, q).unwrap() - t).abs() < 1e-12);
        }
    }
}
