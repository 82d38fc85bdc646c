use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use ndarray::{Array2, Axis};
use serde::Serialize;

use dictbench::dictionary::{fit_mean_dictionary, fit_mse_dictionary, variance_explained, FeatureDictionary};
use dictbench::edit::{apply_edit, write_edit_records, EditRecord};
use dictbench::eval::{
    counterfactual_pairs, dictionary_edit_test, greedy_edit_plans, greedy_edit_test, interp_causal_suite,
    necessity_replacements, necessity_score, read_response, sufficiency_score, Condition, CrossSection,
    CrossSectionName, FeatureSpace, InterventionRequest, InterventionResult, LinearSurrogate, Readout,
    ReportWriter,
};
use dictbench::interp::{score_dictionary, write_explanations_csv, write_explanations_jsonl, GenderMap, PredicateTable, SiteKind};
use dictbench::sae::{load_checkpoint, sae_metrics, save_checkpoint, train_sae, Checkpoint, TrainConfig};
use dictbench::store::{read_store, ActivationDataset};
use dictbench::toy::{
    run_occlusion_sweep, run_oversplit, summarize_occlusion, MixtureConfig, OcclusionConfig,
};

#[derive(Parser)]
#[command(name = "dictbench", version, about = "Feature dictionaries, sparse autoencoders and their evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a supervised feature dictionary to a labeled store.
    FitDict(FitDict),
    /// Train a sparse autoencoder on a store.
    TrainSae(TrainSae),
    /// Score reconstructions by the logit difference they recover.
    EvalSufficiency(EvalPatch),
    /// Score how much of the logit difference is lost with reconstructions mean-ablated.
    EvalNecessity(EvalPatch),
    /// Edit activations toward counterfactuals with sparse feature changes.
    EvalEdit(EvalEdit),
    /// Explain SAE features with attribute predicates.
    EvalInterp(EvalInterp),
    /// Run the feature-occlusion toy sweep.
    ToyOcclusion(ToyOcclusion),
    /// Compare the ideal two-feature SAE with wide randomized SAEs on a Gaussian mixture.
    ToyOversplit(ToyOversplit),
    /// Score patching responses returned for Bridge-v1 requests.
    Report(Report),
}

#[derive(Clone, Copy, ValueEnum)]
enum DictKindArg {
    Mean,
    Mse,
}

#[derive(Args)]
struct FitDict {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "mean")]
    kind: DictKindArg,
    /// Ridge added to the MSE normal equations.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
}

#[derive(Args)]
struct TrainSae {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

/// A dictionary or an SAE checkpoint.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Features {
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    sae: Option<PathBuf>,
}

/// Linear surrogate readout, fit on the store itself.
#[derive(Args)]
struct Surrogate {
    /// Attribute the readout predicts.
    #[arg(long, default_value = "IO")]
    target: String,
    /// Attribute naming the competing class.
    #[arg(long)]
    foil: Option<String>,
}

#[derive(Args)]
struct EvalPatch {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: Features,
    #[command(flatten)]
    surrogate: Surrogate,
    /// Write a Bridge-v1 request into `--out` instead of scoring with the surrogate.
    #[arg(long)]
    bridge: bool,
    #[arg(long, default_value = "NM_out")]
    cross_section: String,
}

#[derive(Args)]
struct EvalEdit {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    features: Features,
    #[command(flatten)]
    surrogate: Surrogate,
    /// Attribute changed between source and counterfactual.
    #[arg(long)]
    attribute: String,
    /// Largest number of feature changes per edit.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write Bridge-v1 requests for the edited and counterfactual activations.
    #[arg(long)]
    bridge: bool,
    #[arg(long, default_value = "NM_out")]
    cross_section: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum SiteArg {
    EndOrS2,
    NameMoverKv,
    Generic,
}

#[derive(Args)]
struct EvalInterp {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    #[arg(long, value_enum, default_value = "generic")]
    site: SiteArg,
    /// `name,gender` CSV enabling gender predicates.
    #[arg(long)]
    genders: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    max_union: usize,
    /// F1 thresholds; the first one counts explained features.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    threshold: Vec<f64>,
    /// Run the causal threshold sweep with a surrogate predicting this attribute.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    foil: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Reduced,
}

#[derive(Args)]
struct ToyOcclusion {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "reduced")]
    preset: Preset,
    /// JSON config replacing the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Offset added to every configured seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    equal_norms: bool,
}

#[derive(Args)]
struct ToyOversplit {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "reduced")]
    preset: Preset,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    out: PathBuf,
    /// Response for the unpatched model.
    #[arg(long)]
    clean: PathBuf,
    /// Response for mean ablation of the cross-section.
    #[arg(long)]
    mean: Option<PathBuf>,
    /// Responses for patched conditions.
    #[arg(long, value_delimiter = ',')]
    responses: Vec<PathBuf>,
    /// Ground-truth patch response that edited responses are compared against.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, default_value = "NM_out")]
    cross_section: String,
    #[arg(long, default_value = "dictionary")]
    dictionary: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_store(path: &Path) -> Result<ActivationDataset> {
    read_store(path).with_context(|| format!("reading store {}", path.display()))
}

fn cross_section(name: &str, store: &ActivationDataset) -> Result<CrossSection> {
    let name: CrossSectionName = serde_json::from_value(serde_json::Value::String(name.into()))
        .with_context(|| format!("unknown cross-section {name:?}"))?;
    Ok(CrossSection::new(name, vec![store.location])?)
}

enum Loaded {
    Dict(FeatureDictionary),
    Sae(Checkpoint),
}

impl Loaded {
    fn open(features: &Features) -> Result<Self> {
        match (&features.dict, &features.sae) {
            (Some(p), _) => Ok(Self::Dict(FeatureDictionary::load(p).with_context(|| format!("loading {}", p.display()))?)),
            (_, Some(p)) => Ok(Self::Sae(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?)),
            _ => bail!("pass --dict or --sae"),
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Dict(_) => "dictionary",
            Self::Sae(_) => "sae",
        }
    }

    /// Reconstructions in raw activation space.
    fn reconstruct(&self, store: &ActivationDataset) -> Result<Array2<f64>> {
        match self {
            Self::Dict(d) => Ok(d.reconstruct_dataset(store)?),
            Self::Sae(c) => {
                let s = c.input_scale;
                let codes = c.params.encode((&store.to_array() * s).view());
                Ok(c.params.decode(codes.view()) / s)
            }
        }
    }

    fn space(&self, store: &ActivationDataset) -> Result<FeatureSpace> {
        Ok(match self {
            Self::Dict(d) => FeatureSpace::from_dictionary(d, store)?,
            Self::Sae(c) => FeatureSpace::from_sae(&c.params, c.input_scale, store)?,
        })
    }
}

fn surrogate(store: &ActivationDataset, s: &Surrogate) -> Result<LinearSurrogate> {
    Ok(LinearSurrogate::fit_centroids(store, &s.target, s.foil.as_deref())?)
}

fn logit_diffs(readout: &impl Readout, store: &ActivationDataset, rows: &Array2<f64>) -> Vec<f64> {
    (0..store.len())
        .map(|i| readout.logit_diff(rows.row(i), &store.schema, store.row_labels(i)))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

#[derive(Serialize)]
struct PromptRow {
    prompt_id: u32,
    ld_clean: f64,
    ld_intervention: f64,
}

fn prompt_rows(store: &ActivationDataset, clean: &[f64], intervention: &[f64]) -> Vec<PromptRow> {
    store
        .prompt_ids
        .iter()
        .zip(clean.iter().zip(intervention))
        .map(|(&prompt_id, (&ld_clean, &ld_intervention))| PromptRow {
            prompt_id,
            ld_clean,
            ld_intervention,
        })
        .collect()
}

fn fit_dict(args: FitDict) -> Result<()> {
    let store = load_store(&args.store)?;
    let dict = match args.kind {
        DictKindArg::Mean => fit_mean_dictionary(&store),
        DictKindArg::Mse => fit_mse_dictionary(&store, args.ridge)?,
    };
    for w in &dict.warnings {
        log::warn!("{w}");
    }
    let ve = variance_explained(&dict, &store)?;
    dict.save(&args.out)?;
    info!("{} features, variance explained {ve:.6}", dict.features.nrows());
    println!("{}", serde_json::json!({ "features": dict.features.nrows(), "variance_explained": ve }));
    Ok(())
}

fn train(args: TrainSae) -> Result<()> {
    let store = load_store(&args.store)?;
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.expansion {
        config.expansion = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    let output = train_sae(&store, &config)?;
    let metrics = sae_metrics(&output.params, output.scale_inputs(store.to_array().view()).view(), config.dead_threshold)?;
    save_checkpoint(
        &args.out,
        &Checkpoint {
            params: output.params,
            epoch: config.epochs,
            input_scale: output.input_scale,
            config,
        },
    )?;
    info!("resampled {} features", output.resampled);
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

fn eval_patch(args: EvalPatch, condition: Condition) -> Result<()> {
    let store = load_store(&args.store)?;
    let loaded = Loaded::open(&args.features)?;
    let recon = loaded.reconstruct(&store)?;
    let replacements = match condition {
        Condition::Reconstruction => recon,
        _ => necessity_replacements(&store, &recon)?,
    };
    if args.bridge {
        let cs = cross_section(&args.cross_section, &store)?;
        let request = InterventionRequest::from_stores(cs, condition, &[&store], vec![replacements])?;
        let path = request.write(&args.out)?;
        println!("{}", path.display());
        return Ok(());
    }
    let readout = surrogate(&store, &args.surrogate)?;
    let a = store.to_array();
    let clean = logit_diffs(&readout, &store, &a);
    let patched = logit_diffs(&readout, &store, &replacements);
    let (test, score) = match condition {
        Condition::Reconstruction => ("sufficiency", sufficiency_score(&patched, &clean)?),
        _ => {
            let mean_a = a.mean_axis(Axis(0)).context("empty store")?;
            let ablated = Array2::from_shape_fn(a.dim(), |(_, j)| mean_a[j]);
            let ld_mean = mean(&logit_diffs(&readout, &store, &ablated));
            ("necessity", necessity_score(mean(&clean), ld_mean, mean(&patched))?)
        }
    };
    let mut report = ReportWriter::new(&args.out)?;
    report.table(test, &args.cross_section, loaded.label(), &prompt_rows(&store, &clean, &patched))?;
    report.summary(test, score)?;
    report.finish()?;
    println!("{}", serde_json::json!({ test: score }));
    Ok(())
}

fn eval_edit(args: EvalEdit) -> Result<()> {
    let store = load_store(&args.store)?;
    let loaded = Loaded::open(&args.features)?;
    let readout = surrogate(&store, &args.surrogate)?;
    let pairs = counterfactual_pairs(&store, &args.attribute, args.max_pairs, args.seed)?;
    let space = loaded.space(&store)?;
    let greedy = greedy_edit_test(&readout, &store, &space, &pairs, args.k)?;
    let mut report = ReportWriter::new(&args.out)?;
    report.table("edit_greedy", &args.cross_section, loaded.label(), &greedy.rows)?;
    report.summary("greedy_agreement", greedy.agreement)?;
    report.summary("no_intervention_agreement", greedy.no_intervention_agreement)?;
    report.summary("greedy_mean_removed_weight", greedy.mean_removed_weight)?;
    if let Loaded::Dict(dict) = &loaded {
        let closed = dictionary_edit_test(&readout, &store, dict, &args.attribute, &pairs)?;
        report.table("edit_closed_form", &args.cross_section, loaded.label(), &closed.rows)?;
        report.summary("closed_form_agreement", closed.agreement)?;
    }

    let plans = greedy_edit_plans(&store, &space, &pairs, args.k)?;
    let records: Vec<EditRecord> = pairs
        .iter()
        .zip(&plans)
        .map(|(p, plan)| EditRecord::new(store.prompt_ids[p.source], store.location, plan))
        .collect();
    write_edit_records(args.out.join("edits.jsonl"), &records)?;
    if args.bridge {
        let sources: Vec<usize> = pairs.iter().map(|p| p.source).collect();
        let subset = store.subset(&sources);
        let a = store.to_array();
        let mut edited = Array2::zeros((pairs.len(), store.dim));
        let mut truth = Array2::zeros((pairs.len(), store.dim));
        for (i, (p, plan)) in pairs.iter().zip(&plans).enumerate() {
            edited.row_mut(i).assign(&apply_edit(a.row(p.source), plan, space.features.view())?);
            truth.row_mut(i).assign(&a.row(p.target));
        }
        let cs = cross_section(&args.cross_section, &store)?;
        InterventionRequest::from_stores(cs.clone(), Condition::Edited, &[&subset], vec![edited])?
            .write(args.out.join("request_edited"))?;
        InterventionRequest::from_stores(cs, Condition::GroundTruthPatch, &[&subset], vec![truth])?
            .write(args.out.join("request_ground_truth"))?;
    }
    report.finish()?;
    println!("{}", serde_json::json!({ "agreement": greedy.agreement, "no_intervention": greedy.no_intervention_agreement }));
    Ok(())
}

fn eval_interp(args: EvalInterp) -> Result<()> {
    let store = load_store(&args.store)?;
    let ckpt = load_checkpoint(&args.sae)?;
    let genders = args.genders.as_deref().map(GenderMap::load).transpose()?;
    let site = match args.site {
        SiteArg::EndOrS2 => SiteKind::EndOrS2,
        SiteArg::NameMoverKv => SiteKind::NameMoverKv,
        SiteArg::Generic => SiteKind::Generic,
    };
    let table = PredicateTable::build(&store, site, genders.as_ref())?;
    let codes = ckpt.params.encode((&store.to_array() * ckpt.input_scale).view());
    let first = *args.threshold.first().context("at least one threshold")?;
    let score = score_dictionary(codes.view(), &table, args.max_union, first)?;
    std::fs::create_dir_all(&args.out)?;
    write_explanations_jsonl(args.out.join("explanations.jsonl"), &score.explanations)?;
    write_explanations_csv(args.out.join("explanations.csv"), &score.explanations)?;
    let mut report = ReportWriter::new(&args.out)?;
    report.summary("threshold", first)?;
    report.summary("n_explained", score.n_explained)?;
    report.summary("n_dead", score.n_dead)?;
    report.summary("histogram", &score.histogram)?;
    if let Some(target) = &args.target {
        let readout = LinearSurrogate::fit_centroids(&store, target, args.foil.as_deref())?;
        let suite = interp_causal_suite(&readout, &store, &ckpt.params, ckpt.input_scale, &score.explanations, &args.threshold)?;
        report.table("interp_causal", &store.location.to_string(), "sae", &suite.points)?;
        report.summary("reconstruction_sufficiency", suite.reconstruction_sufficiency)?;
        report.summary("reconstruction_necessity", suite.reconstruction_necessity)?;
    }
    report.finish()?;
    println!("{}", serde_json::json!({ "n_explained": score.n_explained, "n_dead": score.n_dead, "features": codes.ncols() }));
    Ok(())
}

fn toy_occlusion(args: ToyOcclusion) -> Result<()> {
    let mut config = match (&args.config, args.preset) {
        (Some(p), _) => read_json(p)?,
        (None, Preset::Full) => OcclusionConfig::full(),
        (None, Preset::Reduced) => OcclusionConfig::reduced(),
    };
    if args.equal_norms {
        config = config.with_equal_norms();
    }
    if let Some(t) = args.threshold {
        config.f1_threshold = t;
    }
    for s in &mut config.seeds {
        *s += args.seed;
    }
    let cells = run_occlusion_sweep(&config)?;
    let summary = summarize_occlusion(&cells);
    let mut report = ReportWriter::new(&args.out)?;
    report.table("occlusion", "toy", "sae", &cells)?;
    report.summary("config", &config)?;
    report.summary("occlusion", summary)?;
    report.finish()?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn toy_oversplit(args: ToyOversplit) -> Result<()> {
    let config = match (&args.config, args.preset) {
        (Some(p), _) => read_json(p)?,
        (None, Preset::Full) => MixtureConfig::full(),
        (None, Preset::Reduced) => MixtureConfig::reduced(),
    };
    let result = run_oversplit(&config, args.seed)?;
    let wins = result.randomized_wins(2.0);
    let mut report = ReportWriter::new(&args.out)?;
    report.table("oversplit_ideal", "toy", "two_feature", &result.ideal)?;
    report.table("oversplit_randomized", "toy", "randomized", &result.randomized)?;
    report.table("oversplit_margin", "toy", "randomized", &result.comparisons)?;
    report.summary("cutoff_lambda", result.cutoff_lambda)?;
    report.summary("randomized_wins_2se", wins)?;
    report.finish()?;
    println!("{}", serde_json::json!({ "cutoff_lambda": result.cutoff_lambda, "randomized_wins_2se": wins }));
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    condition: String,
    mean_logit_diff: f64,
    score: f64,
}

fn report(args: Report) -> Result<()> {
    let clean = read_response(&args.clean)?;
    let mean_ablation = args.mean.as_deref().map(read_response).transpose()?;
    let truth = args.ground_truth.as_deref().map(read_response).transpose()?;
    let mut rows = Vec::new();
    let mut report = ReportWriter::new(&args.out)?;
    for path in &args.responses {
        let r = read_response(path)?;
        let aligned = align(&clean, &r)?;
        let score = match r.condition {
            Condition::Reconstruction => sufficiency_score(&aligned.logit_diff, &clean.logit_diff)?,
            Condition::ResidualPlusMean => {
                let m = mean_ablation.as_ref().context("necessity needs --mean")?;
                necessity_score(clean.mean_logit_diff(), m.mean_logit_diff(), r.mean_logit_diff())?
            }
            Condition::Edited => {
                let t = truth.as_ref().context("edit agreement needs --ground-truth")?;
                let t = align(&r, t)?;
                dictbench::eval::edit_agreement(&r.predicted, &t.predicted)?
            }
            other => bail!("no score defined for condition {other}"),
        };
        rows.push(ScoreRow {
            condition: r.condition.to_string(),
            mean_logit_diff: r.mean_logit_diff(),
            score,
        });
        report.summary(&r.condition.to_string(), score)?;
    }
    report.table("scores", &args.cross_section, &args.dictionary, &rows)?;
    report.summary("clean_logit_diff", clean.mean_logit_diff())?;
    let path = report.finish()?;
    println!("{}", path.display());
    Ok(())
}

/// `other` reordered to the prompt order of `reference`; both must cover the same prompts.
fn align(reference: &InterventionResult, other: &InterventionResult) -> Result<InterventionResult> {
    let pos: std::collections::HashMap<u32, usize> =
        other.prompt_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    if pos.len() != reference.prompt_ids.len() || other.prompt_ids.len() != pos.len() {
        bail!("responses cover different prompt sets");
    }
    let mut out = InterventionResult {
        condition: other.condition,
        prompt_ids: Vec::new(),
        logit_diff: Vec::new(),
        predicted: Vec::new(),
    };
    for p in &reference.prompt_ids {
        let &i = pos.get(p).with_context(|| format!("prompt {p} missing from {} response", other.condition))?;
        out.prompt_ids.push(*p);
        out.logit_diff.push(other.logit_diff[i]);
        out.predicted.push(other.predicted[i]);
    }
    Ok(out)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::FitDict(a) => fit_dict(a),
        Command::TrainSae(a) => train(a),
        Command::EvalSufficiency(a) => eval_patch(a, Condition::Reconstruction),
        Command::EvalNecessity(a) => eval_patch(a, Condition::ResidualPlusMean),
        Command::EvalEdit(a) => eval_edit(a),
        Command::EvalInterp(a) => eval_interp(a),
        Command::ToyOcclusion(a) => toy_occlusion(a),
        Command::ToyOversplit(a) => toy_oversplit(a),
        Command::Report(a) => report(a),
    }
}
