//! Repeated random train/test splits by image, cross-validated
//! hyperparameters, and accuracy as a function of the number of test images.
//!
//! Each split takes, per subject, a random `train_fraction` of that subject's
//! images for training and the rest for testing. Test images are grouped into
//! disjoint consecutive groups of `k` (in the shuffled order) and each group is
//! identified by summing per-image evidence: log-likelihoods for the Bayes
//! families, SVM decision scores for the Fisher families.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::svm::{self, LinearModel, SvmOptions};
use super::SVM_STREAM;
use crate::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::fisher::{compute_scores, estimate_information, feature_map, FisherScore, Observation, ScoreModel};
use crate::gaze::SaccadeFeatures;
use crate::markov::{self, argmax_first};
use crate::scenewalk::{self, estimate_saliency, FitOptions, Grid, SaliencyMap, SceneWalkParams};
use crate::seed::derive_seed;
use crate::simulate::ModelKind;

const SPLIT_STREAM: u64 = 0x5350_4c;
const DEFAULT_GRID: [usize; 2] = [128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    Bayes,
    FisherSvm,
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classifier::Bayes => "bayes",
            Classifier::FisherSvm => "fisher-svm",
        })
    }
}

impl FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Classifier::Bayes),
            "fisher-svm" => Ok(Classifier::FisherSvm),
            _ => Err(Error::InvalidInput(format!(
                "unknown classifier {s:?}, expected bayes or fisher-svm"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    BayesMarkov,
    BayesMarkovDyn,
    #[serde(rename = "bayes-scenewalk")]
    BayesSceneWalk,
    FisherSvmMarkov,
    FisherSvmMarkovDyn,
    #[serde(rename = "fisher-svm-scenewalk")]
    FisherSvmSceneWalk,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 6] = [
        ModelFamily::BayesMarkov,
        ModelFamily::BayesMarkovDyn,
        ModelFamily::BayesSceneWalk,
        ModelFamily::FisherSvmMarkov,
        ModelFamily::FisherSvmMarkovDyn,
        ModelFamily::FisherSvmSceneWalk,
    ];

    pub fn new(classifier: Classifier, model: ModelKind) -> Self {
        use ModelFamily::*;
        match (classifier, model) {
            (Classifier::Bayes, ModelKind::Markov) => BayesMarkov,
            (Classifier::Bayes, ModelKind::MarkovDyn) => BayesMarkovDyn,
            (Classifier::Bayes, ModelKind::SceneWalk) => BayesSceneWalk,
            (Classifier::FisherSvm, ModelKind::Markov) => FisherSvmMarkov,
            (Classifier::FisherSvm, ModelKind::MarkovDyn) => FisherSvmMarkovDyn,
            (Classifier::FisherSvm, ModelKind::SceneWalk) => FisherSvmSceneWalk,
        }
    }

    pub fn classifier(self) -> Classifier {
        use ModelFamily::*;
        match self {
            BayesMarkov | BayesMarkovDyn | BayesSceneWalk => Classifier::Bayes,
            _ => Classifier::FisherSvm,
        }
    }

    pub fn model(self) -> ModelKind {
        use ModelFamily::*;
        match self {
            BayesMarkov | FisherSvmMarkov => ModelKind::Markov,
            BayesMarkovDyn | FisherSvmMarkovDyn => ModelKind::MarkovDyn,
            BayesSceneWalk | FisherSvmSceneWalk => ModelKind::SceneWalk,
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.classifier(), self.model())
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    /// Fraction of each subject's images used for training.
    pub train_fraction: f64,
    pub n_splits: usize,
    pub cv_folds: usize,
    pub c_grid: Vec<f64>,
    pub eps_reg_grid: Vec<f64>,
    pub normalize_grid: Vec<bool>,
    pub seed: u64,
    /// Largest number of test images per group, capped by the smallest
    /// per-subject test set.
    pub max_k: Option<usize>,
    /// `[rows, cols]` of the SceneWalk grid, overriding the dataset's.
    pub grid: Option<[usize; 2]>,
    pub scenewalk: FitOptions,
    pub svm: SvmOptions,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            n_splits: 5,
            cv_folds: 3,
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            eps_reg_grid: vec![1e-3, 1e-1],
            normalize_grid: vec![true, false],
            seed: 0,
            max_k: Some(10),
            grid: None,
            scenewalk: FitOptions::default(),
            svm: SvmOptions::default(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidInput(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.n_splits == 0 {
            return Err(Error::InvalidInput("n_splits must be at least 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidInput(format!("cv_folds must be at least 2, got {}", self.cv_folds)));
        }
        if self.c_grid.is_empty() || self.eps_reg_grid.is_empty() || self.normalize_grid.is_empty() {
            return Err(Error::InvalidInput("hyperparameter grids must be non-empty".into()));
        }
        if let Some(c) = self.c_grid.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(Error::InvalidInput(format!("C must be positive, got {c}")));
        }
        if let Some(e) = self.eps_reg_grid.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::InvalidInput(format!("eps_reg must be non-negative, got {e}")));
        }
        if self.max_k == Some(0) {
            return Err(Error::InvalidInput("max_k must be at least 1".into()));
        }
        if let Some([r, c]) = self.grid {
            if r == 0 || c == 0 {
                return Err(Error::InvalidInput(format!("grid must be non-empty, got {r}x{c}")));
            }
        }
        Ok(())
    }

    fn grid_size(&self) -> usize {
        self.c_grid.len() * self.eps_reg_grid.len() * self.normalize_grid.len()
    }
}

/// Hyperparameters selected for one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub c: f64,
    pub eps_reg: f64,
    pub normalize: bool,
    /// Mean held-out accuracy over the folds; absent when the grid has a
    /// single point and no search was run.
    pub cv_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_acc: f64,
    /// Standard error of the mean across splits.
    pub stderr: f64,
    pub per_split: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model_family: ModelFamily,
    pub splits: usize,
    pub classes: Vec<String>,
    pub curve: Vec<CurvePoint>,
    /// One entry per split for the Fisher families, empty otherwise.
    pub hyperparams_chosen: Vec<HyperParams>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl EvalResult {
    /// `k,mean_acc,stderr,split_1,..` with one row per k.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mean_acc,stderr");
        for s in 1..=self.splits {
            out.push_str(&format!(",split_{s}"));
        }
        out.push('\n');
        for p in &self.curve {
            out.push_str(&format!("{},{},{}", p.k, p.mean_acc, p.stderr));
            for a in &p.per_split {
                out.push_str(&format!(",{a}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Item indices per class; class `i` is `Dataset::subjects()[i]`. Test lists
/// are in the order used to form groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Split {
    fn train_items(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.train.iter().enumerate().flat_map(|(c, v)| v.iter().map(move |&i| (c, i)))
    }

    fn test_items(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.test.iter().enumerate().flat_map(|(c, v)| v.iter().map(move |&i| (c, i)))
    }
}

fn by_subject(data: &Dataset, classes: &[String]) -> Vec<Vec<usize>> {
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = vec![Vec::new(); classes.len()];
    for (i, item) in data.items.iter().enumerate() {
        out[index[item.subject_id()]].push(i);
    }
    // Image order, so that splits do not depend on file order.
    for v in &mut out {
        v.sort_by(|&a, &b| data.items[a].image_id().cmp(data.items[b].image_id()));
    }
    out
}

/// Split number `index`: each subject's images are shuffled with a seed
/// derived from the protocol seed, the split index and the subject, then cut
/// at `round(train_fraction · n)` (at least one image on each side).
pub fn make_split(data: &Dataset, protocol: &EvalProtocol, index: usize) -> Result<Split> {
    let classes = data.subjects();
    let groups = by_subject(data, &classes);
    let mut train = Vec::with_capacity(classes.len());
    let mut test = Vec::with_capacity(classes.len());
    for (c, mut items) in groups.into_iter().enumerate() {
        let n = items.len();
        if n < 2 {
            return Err(Error::InsufficientData {
                subject: classes[c].clone(),
                detail: format!("needs at least 2 images for a train/test split, has {n}"),
            });
        }
        let n_train = ((protocol.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let seed = derive_seed(protocol.seed, &[SPLIT_STREAM, index as u64, c as u64]);
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rest = items.split_off(n_train);
        // No image may be on both sides for a subject.
        for &i in &rest {
            assert!(items.iter().all(|&j| data.items[j].image_id() != data.items[i].image_id()));
        }
        train.push(items);
        test.push(rest);
    }
    Ok(Split { train, test })
}

/// Grid used for SceneWalk evaluation: the dataset grid, with rows and
/// columns replaced by the protocol override, or a grid over the fixation
/// extent when the dataset has none.
pub fn eval_grid(data: &Dataset, protocol: &EvalProtocol) -> Result<Grid> {
    match (data.grid, protocol.grid) {
        (Some(g), None) => Ok(g),
        (Some(g), Some([r, c])) => Grid::new(r, c, g.extent_deg),
        (None, size) => {
            let [r, c] = size.unwrap_or(DEFAULT_GRID);
            Grid::new(r, c, data.fixation_extent())
        }
    }
}

/// Saliency per image for one split. Stored maps on `grid` are used as they
/// are; otherwise the map is estimated from the training fixations on that
/// image, falling back to a uniform map when there are too few.
pub fn split_saliency(data: &Dataset, grid: Grid, split: &Split) -> BTreeMap<String, SaliencyMap> {
    let mut fixations: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for item in &data.items {
        fixations.entry(item.image_id()).or_default();
    }
    for (_, i) in split.train_items() {
        let item = &data.items[i];
        fixations
            .get_mut(item.image_id())
            .unwrap()
            .extend(item.path.fixations.iter().map(|f| (f.x, f.y)));
    }
    fixations
        .into_par_iter()
        .map(|(image, fx)| {
            let map = match data.saliency.get(image) {
                Some(m) if m.grid == grid => m.clone(),
                _ => estimate_saliency(&fx, grid).unwrap_or_else(|_| SaliencyMap::uniform(grid)),
            };
            (image.to_string(), map)
        })
        .collect()
}

/// Evaluates `family` on `data` over `protocol.n_splits` random splits.
pub fn run_protocol(data: &Dataset, family: ModelFamily, protocol: &EvalProtocol) -> Result<EvalResult> {
    protocol.validate()?;
    data.validate()?;
    if data.items.is_empty() {
        return Err(Error::InvalidInput("dataset has no scanpaths".into()));
    }
    let classes = data.subjects();
    let splits: Vec<Split> = (0..protocol.n_splits)
        .map(|s| make_split(data, protocol, s))
        .collect::<Result<_>>()?;
    let k_max = splits
        .iter()
        .flat_map(|s| s.test.iter().map(Vec::len))
        .min()
        .unwrap()
        .min(protocol.max_k.unwrap_or(usize::MAX));

    if classes.len() == 1 {
        let msg = format!("only one subject ({}); identification is trivially correct", classes[0]);
        log::warn!("{msg}");
        let curve = (1..=k_max)
            .map(|k| CurvePoint {
                k,
                mean_acc: 1.0,
                stderr: 0.0,
                per_split: vec![1.0; protocol.n_splits],
            })
            .collect();
        return Ok(EvalResult {
            model_family: family,
            splits: protocol.n_splits,
            classes,
            curve,
            hyperparams_chosen: Vec::new(),
            warnings: vec![msg],
            provenance: None,
        });
    }

    let ctx = Context::new(data, family, protocol, &classes)?;
    let per_split: Vec<(Vec<f64>, Option<HyperParams>)> = splits
        .par_iter()
        .map(|split| {
            let (evidence, hp) = ctx.evidence(split)?;
            let acc = (1..=k_max).map(|k| group_accuracy(&evidence, k)).collect();
            Ok((acc, hp))
        })
        .collect::<Result<_>>()?;

    let n = protocol.n_splits as f64;
    let curve = (1..=k_max)
        .map(|k| {
            let accs: Vec<f64> = per_split.iter().map(|(a, _)| a[k - 1]).collect();
            let mean = accs.iter().sum::<f64>() / n;
            let stderr = if accs.len() > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            CurvePoint {
                k,
                mean_acc: mean,
                stderr,
                per_split: accs,
            }
        })
        .collect();
    Ok(EvalResult {
        model_family: family,
        splits: protocol.n_splits,
        classes,
        curve,
        hyperparams_chosen: per_split.iter().filter_map(|(_, h)| *h).collect(),
        warnings: Vec::new(),
        provenance: None,
    })
}

/// Fraction of disjoint consecutive groups of `k` test images identified
/// correctly; `evidence[c][j]` is the per-class evidence for subject `c`'s
/// `j`-th test image.
fn group_accuracy(evidence: &[Vec<Vec<f64>>], k: usize) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (c, rows) in evidence.iter().enumerate() {
        for group in rows.chunks_exact(k) {
            let mut sum = vec![0.0; group[0].len()];
            for row in group {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            correct += usize::from(argmax_first(&sum) == c);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// Data shared by all splits.
struct Context<'a> {
    data: &'a Dataset,
    family: ModelFamily,
    protocol: &'a EvalProtocol,
    classes: &'a [String],
    features: Vec<Vec<SaccadeFeatures>>,
    grid: Option<Grid>,
}

impl<'a> Context<'a> {
    fn new(data: &'a Dataset, family: ModelFamily, protocol: &'a EvalProtocol, classes: &'a [String]) -> Result<Self> {
        let model = family.model();
        let features = if model.markov_config().is_some() {
            if model == ModelKind::MarkovDyn {
                if let Some(item) = data.items.iter().find(|i| i.features.is_none()) {
                    return Err(Error::ChannelUnavailable(format!(
                        "{}/{}: dynamics channels need per-saccade features from raw gaze",
                        item.subject_id(),
                        item.image_id()
                    )));
                }
            }
            data.items
                .iter()
                .map(|i| i.saccade_features().map(|f| f.into_owned()))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let grid = match model {
            ModelKind::SceneWalk => Some(eval_grid(data, protocol)?),
            _ => None,
        };
        Ok(Self {
            data,
            family,
            protocol,
            classes,
            features,
            grid,
        })
    }

    /// Per-class evidence for every test image of the split.
    fn evidence(&self, split: &Split) -> Result<(Vec<Vec<Vec<f64>>>, Option<HyperParams>)> {
        let model = self.family.model();
        match (self.family.classifier(), model.markov_config()) {
            (Classifier::Bayes, Some(config)) => {
                let users: Vec<_> = split
                    .train
                    .par_iter()
                    .map(|idx| {
                        let data: Vec<Vec<SaccadeFeatures>> = idx.iter().map(|&i| self.features[i].clone()).collect();
                        markov::fit(&data, config).map(|f| f.params)
                    })
                    .collect::<Result<_>>()?;
                let ev = self.per_test(split, |i| {
                    users.iter().map(|m| markov::loglik(&self.features[i], m)).collect()
                })?;
                Ok((ev, None))
            }
            (Classifier::FisherSvm, Some(config)) => {
                let train: Vec<Vec<SaccadeFeatures>> =
                    split.train_items().map(|(_, i)| self.features[i].clone()).collect();
                let pooled = markov::fit(&train, config)?.params;
                let obs: Vec<Observation> = self.features.iter().map(|f| Observation::Saccades(f)).collect();
                self.fisher_evidence(split, &pooled, &obs)
            }
            (classifier, None) => {
                let grid = self.grid.unwrap();
                let sal = split_saliency(self.data, grid, split);
                let pair = |i: usize| {
                    let p = &self.data.items[i].path;
                    (p, &sal[p.image_id.as_str()])
                };
                let train: Vec<_> = split.train_items().map(|(_, i)| pair(i)).collect();
                let opts = &self.protocol.scenewalk;
                let pooled = scenewalk::fit(&train, &SceneWalkParams::default(), opts)?.params;
                if classifier == Classifier::Bayes {
                    let users: Vec<SceneWalkParams> = split
                        .train
                        .par_iter()
                        .map(|idx| {
                            let items: Vec<_> = idx.iter().map(|&i| pair(i)).collect();
                            scenewalk::fit(&items, &pooled, opts).map(|r| r.params)
                        })
                        .collect::<Result<_>>()?;
                    let ev = self.per_test(split, |i| {
                        let (p, h) = pair(i);
                        users.iter().map(|m| scenewalk::loglik(p, h, m, opts.init_policy)).collect()
                    })?;
                    Ok((ev, None))
                } else {
                    let obs: Vec<Observation> = (0..self.data.items.len())
                        .map(|i| {
                            let (p, h) = pair(i);
                            Observation::Fixations(p, h)
                        })
                        .collect();
                    self.fisher_evidence(split, &pooled, &obs)
                }
            }
        }
    }

    fn per_test<F>(&self, split: &Split, f: F) -> Result<Vec<Vec<Vec<f64>>>>
    where
        F: Fn(usize) -> Result<Vec<f64>> + Sync,
    {
        split
            .test
            .iter()
            .map(|idx| idx.par_iter().map(|&i| f(i)).collect())
            .collect()
    }

    /// Scores every train and test item under the pooled model, selects
    /// hyperparameters by cross-validation on the training items and returns
    /// SVM decision scores on the test items.
    fn fisher_evidence<M: ScoreModel>(
        &self,
        split: &Split,
        pooled: &M,
        obs: &[Observation<'_>],
    ) -> Result<(Vec<Vec<Vec<f64>>>, Option<HyperParams>)> {
        let mut needed: Vec<usize> = split.train_items().chain(split.test_items()).map(|(_, i)| i).collect();
        needed.sort_unstable();
        let picked: Vec<Observation> = needed.iter().map(|&i| obs[i]).collect();
        let scores: BTreeMap<usize, FisherScore> = needed.iter().copied().zip(compute_scores(pooled, &picked)?).collect();

        let hp = self.select_hyperparams(split, &scores)?;
        let train: Vec<(usize, &FisherScore)> = split.train_items().map(|(c, i)| (c, &scores[&i])).collect();
        let model = fit_classifier(&train, self.classes, &hp, self.protocol)?;
        let ev = split
            .test
            .iter()
            .map(|idx| {
                idx.iter()
                    .map(|i| {
                        let phi = feature_map(&scores[i], &model.1, hp.normalize)?;
                        svm::decision_scores(&model.0, &phi)
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok((ev, Some(hp)))
    }

    /// Grid search over `(C, ε_reg, normalize)` by `cv_folds`-fold
    /// cross-validation on the training items. Folds assign each subject's
    /// training images round-robin. C is searched in ascending order and only
    /// strict improvements replace the incumbent, so ties favor smaller C.
    fn select_hyperparams(&self, split: &Split, scores: &BTreeMap<usize, FisherScore>) -> Result<HyperParams> {
        let p = self.protocol;
        let mut c_grid = p.c_grid.clone();
        c_grid.sort_by(f64::total_cmp);
        let candidates: Vec<HyperParams> = c_grid
            .iter()
            .flat_map(|&c| {
                p.eps_reg_grid.iter().flat_map(move |&eps_reg| {
                    p.normalize_grid.iter().map(move |&normalize| HyperParams {
                        c,
                        eps_reg,
                        normalize,
                        cv_accuracy: None,
                    })
                })
            })
            .collect();
        if p.grid_size() == 1 {
            return Ok(candidates[0]);
        }
        for (c, idx) in split.train.iter().enumerate() {
            if idx.len() < p.cv_folds {
                return Err(Error::InsufficientData {
                    subject: self.classes[c].clone(),
                    detail: format!(
                        "{} training images, fewer than the {} cross-validation folds",
                        idx.len(),
                        p.cv_folds
                    ),
                });
            }
        }
        let fold_of = |j: usize| j % p.cv_folds;
        let accuracies: Vec<f64> = candidates
            .par_iter()
            .map(|hp| {
                let (mut correct, mut total) = (0usize, 0usize);
                for fold in 0..p.cv_folds {
                    let mut fit_set = Vec::new();
                    let mut held = Vec::new();
                    for (c, idx) in split.train.iter().enumerate() {
                        for (j, i) in idx.iter().enumerate() {
                            if fold_of(j) == fold {
                                held.push((c, &scores[i]));
                            } else {
                                fit_set.push((c, &scores[i]));
                            }
                        }
                    }
                    let (model, info) = fit_classifier(&fit_set, self.classes, hp, p)?;
                    for (c, s) in held {
                        let phi = feature_map(s, &info, hp.normalize)?;
                        correct += usize::from(svm::identify(&model, &[phi])? == c);
                        total += 1;
                    }
                }
                Ok(correct as f64 / total as f64)
            })
            .collect::<Result<_>>()?;
        let mut best = 0;
        for (i, &a) in accuracies.iter().enumerate() {
            if a > accuracies[best] {
                best = i;
            }
        }
        Ok(HyperParams {
            cv_accuracy: Some(accuracies[best]),
            ..candidates[best]
        })
    }
}

/// Estimates the information matrix from the training scores and trains the
/// SVM on their feature maps.
fn fit_classifier(
    train: &[(usize, &FisherScore)],
    classes: &[String],
    hp: &HyperParams,
    protocol: &EvalProtocol,
) -> Result<(LinearModel, crate::fisher::FisherInformation)> {
    let scores: Vec<FisherScore> = train.iter().map(|(_, s)| (*s).clone()).collect();
    let info = estimate_information(&scores, hp.eps_reg)?;
    let x: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| feature_map(s, &info, hp.normalize))
        .collect::<Result<_>>()?;
    let y: Vec<usize> = train.iter().map(|(c, _)| *c).collect();
    let seed = derive_seed(protocol.seed, &[SVM_STREAM]);
    let model = svm::train(&x, &y, classes, hp.c, seed, &protocol.svm)?;
    Ok((model, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{generate_cohort, SyntheticCohortSpec};

    fn cohort(model: ModelKind, users: usize, delta: f64, images: usize, t: usize, seed: u64) -> Dataset {
        generate_cohort(&SyntheticCohortSpec::new(model, users, delta, images, t, seed))
            .unwrap()
            .dataset
    }

    fn small_protocol(seed: u64) -> EvalProtocol {
        EvalProtocol {
            n_splits: 3,
            c_grid: vec![0.1, 1.0],
            eps_reg_grid: vec![1e-3],
            normalize_grid: vec![true],
            seed,
            ..EvalProtocol::default()
        }
    }

    #[test]
    fn family_names_round_trip() {
        let names: Vec<String> = ModelFamily::ALL.iter().map(|f| f.to_string()).collect();
        assert_eq!(
            names,
            [
                "bayes-markov",
                "bayes-markov-dyn",
                "bayes-scenewalk",
                "fisher-svm-markov",
                "fisher-svm-markov-dyn",
                "fisher-svm-scenewalk"
            ]
        );
        for f in ModelFamily::ALL {
            assert_eq!(f.to_string().parse::<ModelFamily>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
            assert_eq!(ModelFamily::new(f.classifier(), f.model()), f);
        }
        assert!("svm".parse::<ModelFamily>().is_err());
    }

    #[test]
    fn splits_are_disjoint_by_image_and_reproducible() {
        let data = cohort(ModelKind::Markov, 4, 0.3, 9, 10, 1);
        let p = EvalProtocol::default();
        let a = make_split(&data, &p, 0).unwrap();
        assert_eq!(a, make_split(&data, &p, 0).unwrap());
        assert_ne!(a, make_split(&data, &p, 1).unwrap());
        for (tr, te) in a.train.iter().zip(&a.test) {
            assert_eq!(tr.len(), 5);
            assert_eq!(te.len(), 4);
            let subj = data.items[tr[0]].subject_id();
            for &i in tr.iter().chain(te) {
                assert_eq!(data.items[i].subject_id(), subj);
            }
            for &i in te {
                assert!(tr.iter().all(|&j| data.items[j].image_id() != data.items[i].image_id()));
            }
        }
    }

    #[test]
    fn group_accuracy_counts_disjoint_groups() {
        // Subject 0 has evidence for itself on 3 of 4 images.
        let ev = vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 5.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0]],
        ];
        assert_eq!(group_accuracy(&ev, 1), 6.0 / 7.0);
        // k=2: groups {1,2} miss, {3,4} hit, {1,2} hit; the last image is dropped.
        assert_eq!(group_accuracy(&ev, 2), 2.0 / 3.0);
    }

    #[test]
    fn bayes_markov_matches_bayes_identify() {
        let data = cohort(ModelKind::Markov, 4, 0.3, 10, 15, 2);
        let p = small_protocol(3);
        let res = run_protocol(&data, ModelFamily::BayesMarkov, &p).unwrap();
        for (s, _) in res.curve[0].per_split.iter().enumerate() {
            let split = make_split(&data, &p, s).unwrap();
            let feats = |i: usize| data.items[i].saccade_features().unwrap().into_owned();
            let users: Vec<_> = split
                .train
                .iter()
                .map(|idx| {
                    let d: Vec<_> = idx.iter().map(|&i| feats(i)).collect();
                    markov::fit(&d, markov::MarkovConfig::Base).unwrap().params
                })
                .collect();
            for k in 1..=res.curve.len() {
                let (mut ok, mut n) = (0, 0);
                for (c, idx) in split.test.iter().enumerate() {
                    for g in idx.chunks_exact(k) {
                        let test: Vec<_> = g.iter().map(|&i| feats(i)).collect();
                        ok += usize::from(markov::bayes_identify(&test, &users).unwrap() == c);
                        n += 1;
                    }
                }
                assert_eq!(res.curve[k - 1].per_split[s], ok as f64 / n as f64);
            }
        }
    }

    #[test]
    fn fisher_markov_identifies_distinct_users_and_is_reproducible() {
        let data = cohort(ModelKind::Markov, 4, 0.5, 12, 30, 4);
        let p = small_protocol(5);
        let a = run_protocol(&data, ModelFamily::FisherSvmMarkov, &p).unwrap();
        let b = run_protocol(&data, ModelFamily::FisherSvmMarkov, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.curve.len(), 6);
        assert_eq!(a.hyperparams_chosen.len(), 3);
        assert!(a.curve[0].mean_acc > 0.5, "{:?}", a.curve[0]);
        for pnt in &a.curve {
            assert!(pnt.per_split.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let csv = a.to_csv();
        assert!(csv.starts_with("k,mean_acc,stderr,split_1,split_2,split_3\n1,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        // Within each image, subject labels are permuted, so a label carries no
        // information about who produced the scanpath.
        let mut data = cohort(ModelKind::Markov, 5, 0.5, 24, 20, 6);
        let subjects = data.subjects();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut images: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, item) in data.items.iter().enumerate() {
            images.entry(item.image_id().to_string()).or_default().push(i);
        }
        for idx in images.values() {
            let mut perm = subjects.clone();
            perm.shuffle(&mut rng);
            for (&i, s) in idx.iter().zip(perm) {
                data.items[i].path.subject_id = s;
            }
        }
        let p = EvalProtocol {
            n_splits: 5,
            c_grid: vec![1.0],
            eps_reg_grid: vec![1e-3],
            normalize_grid: vec![true],
            seed: 8,
            ..EvalProtocol::default()
        };
        let n_tests = (5 * 12 * 5) as f64;
        let sigma = (0.2 * 0.8 / n_tests).sqrt();
        for fam in [ModelFamily::BayesMarkov, ModelFamily::FisherSvmMarkov] {
            let acc = run_protocol(&data, fam, &p).unwrap().curve[0].mean_acc;
            assert!((acc - 0.2).abs() <= 3.0 * sigma, "{fam}: {acc}");
        }
    }

    #[test]
    fn single_subject_is_trivial_with_warning() {
        let data = cohort(ModelKind::Markov, 2, 0.0, 6, 5, 9);
        let one = Dataset {
            items: data.items.into_iter().filter(|i| i.subject_id() == "u01").collect(),
            ..Dataset::default()
        };
        let res = run_protocol(&one, ModelFamily::FisherSvmMarkov, &EvalProtocol::default()).unwrap();
        assert_eq!(res.curve.len(), 3);
        assert!(res.curve.iter().all(|p| p.mean_acc == 1.0));
        assert_eq!(res.warnings.len(), 1);
    }

    #[test]
    fn insufficient_data_names_the_subject() {
        let mut data = cohort(ModelKind::Markov, 3, 0.2, 4, 6, 10);
        data.items.retain(|i| i.subject_id() != "u02" || i.image_id() == "img001");
        let err = run_protocol(&data, ModelFamily::BayesMarkov, &EvalProtocol::default()).unwrap_err();
        assert!(matches!(&err, Error::InsufficientData { subject, .. } if subject == "u02"), "{err}");

        // Two training images cannot feed three folds.
        let data = cohort(ModelKind::Markov, 3, 0.2, 4, 6, 10);
        let err = run_protocol(&data, ModelFamily::FisherSvmMarkov, &EvalProtocol::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { .. }), "{err}");
    }

    #[test]
    fn dynamics_family_needs_dynamics_features() {
        let mut data = cohort(ModelKind::Markov, 2, 0.2, 4, 6, 11);
        for it in &mut data.items {
            it.features = None;
        }
        let err = run_protocol(&data, ModelFamily::BayesMarkovDyn, &small_protocol(0)).unwrap_err();
        assert!(matches!(err, Error::ChannelUnavailable(_)));
    }

    #[test]
    fn scenewalk_families_run_on_small_grids() {
        let mut data = cohort(ModelKind::SceneWalk, 3, 0.4, 6, 8, 12);
        data.saliency.clear();
        let p = EvalProtocol {
            n_splits: 2,
            grid: Some([12, 12]),
            c_grid: vec![1.0],
            eps_reg_grid: vec![1e-3],
            normalize_grid: vec![true],
            scenewalk: FitOptions {
                max_iter: 30,
                ..FitOptions::default()
            },
            ..EvalProtocol::default()
        };
        for fam in [ModelFamily::BayesSceneWalk, ModelFamily::FisherSvmSceneWalk] {
            let res = run_protocol(&data, fam, &p).unwrap();
            assert_eq!(res.curve.len(), 3);
            assert!(res.curve.iter().all(|c| (0.0..=1.0).contains(&c.mean_acc)));
        }
    }

    #[test]
    fn protocol_config_rejects_unknown_keys() {
        let p: EvalProtocol = serde_json::from_str(r#"{"n_splits": 2, "c_grid": [1.0]}"#).unwrap();
        assert_eq!(p.n_splits, 2);
        assert_eq!(p.cv_folds, 3);
        assert!(serde_json::from_str::<EvalProtocol>(r#"{"splits": 2}"#).is_err());
        assert!(EvalProtocol { train_fraction: 1.0, ..p.clone() }.validate().is_err());
        assert!(EvalProtocol { c_grid: vec![], ..p }.validate().is_err());
    }
}
