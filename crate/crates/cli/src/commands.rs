use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gazeid::classify::{
    self, eval_grid, run_protocol, split_saliency, LinearModel, ModelFamily, Split, SVM_STREAM,
};
use gazeid::dataset::{
    read_dataset, read_feature_table, read_json, read_recording, read_saliency, write_atomic, write_dataset,
    write_json, write_saliency, Dataset, Item, Provenance,
};
use gazeid::fisher::{compute_scores, estimate_information, feature_map, features_csv, FisherInformation, Observation};
use gazeid::gaze::{detect_saccades, extract_features, fit_vigor_rate, GazeRecording, SaccadeFeatures, VigorFit};
use gazeid::markov::{self, FitReport, MarkovModelParams};
use gazeid::scenewalk::{self, Grid, SaliencyMap, SceneWalkFitReport, SceneWalkParams};
use gazeid::seed::derive_seed;
use gazeid::simulate::{generate_cohort, ModelKind, SyntheticCohortSpec, UserParams};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Writes `config.json` next to a command's outputs.
fn echo_config(out: &Path, cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a> {
        provenance: &'a Provenance,
        config: &'a RunConfig,
    }
    write_json(&out.join("config.json"), &Echo { provenance: prov, config: cfg })?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VigorFile {
    provenance: Provenance,
    vigor: VigorFit,
}

/// Raw recordings (`*.csv` with `.json` sidecars) to a dataset with
/// scanpaths and per-saccade features including dynamics and vigor.
pub fn detect(raw_dir: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(raw_dir)
        .with_context(|| format!("{}", raw_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no recordings found in {}", raw_dir.display());
    }
    let mut recs: Vec<(GazeRecording, gazeid::gaze::Scanpath)> = Vec::with_capacity(files.len());
    for f in &files {
        let rec = read_recording(f)?;
        let path = detect_saccades(&rec, &cfg.detection).with_context(|| format!("{}", f.display()))?;
        recs.push((rec, path));
    }
    // Main-sequence pairs per subject for the global vigor rate.
    let mut pairs: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (rec, path) in &recs {
        let entry = pairs.entry(rec.subject_id.clone()).or_default();
        for f in extract_features(path, Some(rec), None)? {
            if let Some(v) = f.peak_speed {
                if v > 0.0 && f.amplitude > 0.0 {
                    entry.push((v, f.amplitude));
                }
            }
        }
    }
    let vigor = fit_vigor_rate(&pairs)?;
    let items = recs
        .iter()
        .map(|(rec, path)| {
            let features = extract_features(path, Some(rec), Some(&vigor))?;
            Ok(Item {
                path: path.clone(),
                features: Some(features),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset {
        items,
        ..Dataset::default()
    };
    let prov = cfg.provenance(cfg.seed(), None);
    write_dataset(out, &data, Some(&prov))?;
    write_json(&out.join("vigor.json"), &VigorFile { provenance: prov.clone(), vigor })?;
    echo_config(out, cfg, &prov)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    provenance: Provenance,
    model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    markov: Option<MarkovModelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    markov_report: Option<FitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenewalk: Option<SceneWalkParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenewalk_report: Option<SceneWalkFitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<Grid>,
}

fn markov_features(data: &Dataset, model: ModelKind) -> Result<Vec<Vec<SaccadeFeatures>>> {
    if model == ModelKind::MarkovDyn {
        if let Some(i) = data.items.iter().find(|i| i.features.is_none()) {
            bail!(
                "channel unavailable: {}/{} has no per-saccade features; run detect on raw recordings first",
                i.subject_id(),
                i.image_id()
            );
        }
    }
    Ok(data
        .items
        .iter()
        .map(|i| i.saccade_features().map(|f| f.into_owned()))
        .collect::<gazeid::Result<_>>()?)
}

/// Saliency per image of `data`: maps stored in `model_dir/saliency` first,
/// then the dataset's own maps on `grid`, then estimates from the dataset's
/// fixations.
fn saliency_for(data: &Dataset, grid: Grid, model_dir: Option<&Path>) -> Result<BTreeMap<String, SaliencyMap>> {
    let all = Split {
        train: vec![(0..data.items.len()).collect()],
        test: vec![Vec::new()],
    };
    let mut maps = split_saliency(data, grid, &all);
    if let Some(dir) = model_dir {
        let sal = dir.join("saliency");
        for (image, map) in maps.iter_mut() {
            if sal.join(format!("{image}.json")).exists() {
                let stored = read_saliency(&sal, image)?;
                if stored.grid == grid {
                    *map = stored;
                }
            }
        }
    }
    Ok(maps)
}

/// Pooled maximum-likelihood fit over every scanpath in the dataset.
pub fn fit(dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let data = read_dataset(dataset)?;
    let model = cfg.model()?;
    let prov = cfg.provenance(cfg.seed(), None);
    let file = match model.markov_config() {
        Some(config) => {
            let fit = markov::fit(&markov_features(&data, model)?, config)?;
            ModelFile {
                provenance: prov.clone(),
                model,
                markov: Some(fit.params),
                markov_report: Some(fit.report),
                scenewalk: None,
                scenewalk_report: None,
                grid: None,
            }
        }
        None => {
            let grid = eval_grid(&data, &cfg.protocol)?;
            let maps = saliency_for(&data, grid, None)?;
            let items: Vec<_> = data.items.iter().map(|i| (&i.path, &maps[i.image_id()])).collect();
            let report = scenewalk::fit(&items, &SceneWalkParams::default(), &cfg.protocol.scenewalk)?;
            for (image, map) in &maps {
                write_saliency(&out.join("saliency"), image, map)?;
            }
            ModelFile {
                provenance: prov.clone(),
                model,
                markov: None,
                markov_report: None,
                scenewalk: Some(report.params),
                scenewalk_report: Some(report),
                grid: Some(grid),
            }
        }
    };
    write_json(&out.join("model.json"), &file)?;
    echo_config(out, cfg, &prov)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InformationFile {
    provenance: Provenance,
    information: FisherInformation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesMeta {
    provenance: Provenance,
    model_tag: String,
    dim: usize,
    eps_reg: f64,
    normalize: bool,
}

/// Fisher feature maps of every scanpath under a fitted model. The
/// information matrix is estimated from these scores unless `info` names one
/// estimated earlier (on training data).
pub fn scores(dataset: &Path, model_file: &Path, info: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<()> {
    let data = read_dataset(dataset)?;
    let mf: ModelFile = read_json(model_file)?;
    let prov = cfg.provenance(cfg.seed(), None);
    let scores = match (&mf.markov, &mf.scenewalk) {
        (Some(m), None) => {
            let feats = markov_features(&data, mf.model)?;
            let obs: Vec<Observation> = feats.iter().map(|f| Observation::Saccades(f)).collect();
            compute_scores(m, &obs)?
        }
        (None, Some(p)) => {
            let grid = mf.grid.context("scenewalk model file has no grid")?;
            let maps = saliency_for(&data, grid, model_file.parent())?;
            let obs: Vec<Observation> = data
                .items
                .iter()
                .map(|i| Observation::Fixations(&i.path, &maps[i.image_id()]))
                .collect();
            compute_scores(p, &obs)?
        }
        _ => bail!("{}: expected exactly one of markov or scenewalk parameters", model_file.display()),
    };
    let information = match info {
        Some(p) => read_json::<InformationFile>(p)?.information,
        None => {
            let i = estimate_information(&scores, cfg.eps_reg)?;
            write_json(
                &out.join("information.json"),
                &InformationFile {
                    provenance: prov.clone(),
                    information: i.clone(),
                },
            )?;
            i
        }
    };
    let rows = data
        .items
        .iter()
        .zip(&scores)
        .map(|(item, s)| {
            Ok((
                item.subject_id().to_string(),
                item.image_id().to_string(),
                feature_map(s, &information, cfg.normalize)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(&out.join("features.csv"), features_csv(&rows).as_bytes())?;
    write_json(
        &out.join("features.json"),
        &FeaturesMeta {
            provenance: prov.clone(),
            model_tag: scores[0].model_tag.clone(),
            dim: information.dim,
            eps_reg: information.eps_reg,
            normalize: cfg.normalize,
        },
    )?;
    echo_config(out, cfg, &prov)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierFile {
    provenance: Provenance,
    classifier: LinearModel,
}

/// Classes are the sorted distinct subject ids of the feature table.
pub fn train(features: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let rows = read_feature_table(features)?;
    let classes: Vec<String> = rows
        .iter()
        .map(|r| r.0.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let labels: Vec<usize> = rows.iter().map(|r| classes.binary_search(&r.0).unwrap()).collect();
    let x: Vec<Vec<f64>> = rows.into_iter().map(|r| r.2).collect();
    let seed = cfg.seed();
    let model = classify::train(&x, &labels, &classes, cfg.c, derive_seed(seed, &[SVM_STREAM]), &cfg.protocol.svm)?;
    let prov = cfg.provenance(seed, None);
    write_json(
        &out.join("classifier.json"),
        &ClassifierFile {
            provenance: prov.clone(),
            classifier: model,
        },
    )?;
    echo_config(out, cfg, &prov)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionsMeta {
    provenance: Provenance,
    k: usize,
    groups: usize,
    /// Fraction of groups whose subject is a known class and was predicted.
    accuracy: f64,
}

/// Identifies disjoint consecutive groups of `k` rows per subject, in file
/// order; leftover rows that do not fill a group are skipped.
pub fn identify(features: &Path, classifier: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let rows = read_feature_table(features)?;
    let model = read_json::<ClassifierFile>(classifier)?.classifier;
    let mut by_subject: BTreeMap<&str, Vec<(&str, &Vec<f64>)>> = BTreeMap::new();
    let mut order = Vec::new();
    for (s, i, phi) in &rows {
        if !by_subject.contains_key(s.as_str()) {
            order.push(s.as_str());
        }
        by_subject.entry(s).or_default().push((i, phi));
    }
    let mut csv = String::from("subject_id,image_ids,predicted\n");
    let (mut groups, mut correct) = (0usize, 0usize);
    for s in order {
        for g in by_subject[s].chunks_exact(cfg.k) {
            let phis: Vec<Vec<f64>> = g.iter().map(|(_, p)| (*p).clone()).collect();
            let pred = &model.classes[classify::identify(&model, &phis)?];
            let images: Vec<&str> = g.iter().map(|(i, _)| *i).collect();
            csv.push_str(&format!("{s},{},{pred}\n", images.join(";")));
            groups += 1;
            correct += usize::from(pred == s);
        }
    }
    if groups == 0 {
        bail!("no subject has {} feature rows to form a group", cfg.k);
    }
    let prov = cfg.provenance(cfg.seed(), None);
    write_atomic(&out.join("predictions.csv"), csv.as_bytes())?;
    write_json(
        &out.join("predictions.json"),
        &PredictionsMeta {
            provenance: prov.clone(),
            k: cfg.k,
            groups,
            accuracy: correct as f64 / groups as f64,
        },
    )?;
    echo_config(out, cfg, &prov)
}

#[derive(Serialize)]
struct UsersFile<'a> {
    provenance: &'a Provenance,
    users: &'a BTreeMap<String, UserParams>,
}

/// Synthetic cohort from a spec file; `--seed` replaces the spec's seed.
pub fn simulate(spec_file: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut spec: SyntheticCohortSpec = read_json(spec_file)?;
    if let Some(s) = cfg.seed {
        spec.seed = s;
    }
    let cohort = generate_cohort(&spec)?;
    let prov = cfg.provenance(spec.seed, Some(&serde_json::to_value(&spec)?));
    write_dataset(out, &cohort.dataset, Some(&prov))?;
    write_json(
        &out.join("users.json"),
        &UsersFile {
            provenance: &prov,
            users: &cohort.users,
        },
    )?;
    echo_config(out, cfg, &prov)
}

/// Full evaluation protocol; writes `results.json` and `results.csv`.
pub fn eval(dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let data = read_dataset(dataset)?;
    let family = ModelFamily::new(cfg.classifier()?, cfg.model()?);
    let mut result = run_protocol(&data, family, &cfg.protocol)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let prov = cfg.provenance(cfg.protocol.seed, None);
    result.provenance = Some(prov.clone());
    write_json(&out.join("results.json"), &result)?;
    write_atomic(&out.join("results.csv"), result.to_csv().as_bytes())?;
    echo_config(out, cfg, &prov)
}
