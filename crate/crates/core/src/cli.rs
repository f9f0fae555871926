//! Command-line front end: every pipeline stage as a subcommand plus the
//! end-to-end `pipeline` and the `sweep-d` component scan.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::knn::{self, ScoreReport, ScoringConfig, DEFAULT_K};
use crate::metrics::{self, EvalReport};
use crate::prompt::{PromptFile, PromptSet};
use crate::report::{self, format_sig17};
use crate::subspace::{self, ConceptSubspace, SubspaceOptions};
use crate::synth::{self, SyntheticSpec};
use crate::tensor_io::{self, EmbeddingMatrix, LabeledSet, Manifest};
use crate::transform::{self, Mode, TransformSpec};

#[derive(Debug, Parser)]
#[command(
    name = "textguide",
    version,
    about = "Steer embedding anomaly detection with concept subspaces built from text prompts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic multi-attribute world
    Synth(SynthArgs),
    /// Render a prompt grid and print its digest
    RenderPrompts(RenderArgs),
    /// Build a concept subspace from prompt text features
    BuildSubspace(BuildArgs),
    /// Apply guide/ignore projections to an array file
    Transform(TransformArgs),
    /// kNN anomaly scores of test features against normal train features
    Score(ScoreArgs),
    /// AUROC, AUPRC and FPR95 of a score file
    Eval(EvalArgs),
    /// Prompts to subspace to transform to scores to metrics, in one run
    Pipeline(PipelineArgs),
    /// Rerun the pipeline for several component counts and tabulate metrics
    SweepD(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Normal values of an attribute, `name=v1,v2`; defaults to each attribute's first value
    #[arg(long = "normal", value_name = "NAME=VALUES")]
    pub normal: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SubspaceArgs {
    /// Prompt file `{"templates": [...], "values": [...]}`
    #[arg(long)]
    pub prompts: PathBuf,
    /// Text features, one row per rendered prompt in value-major order
    #[arg(long)]
    pub text_features: PathBuf,
    /// Number of concept axes (default 16 for guide, 128 for ignore)
    #[arg(long)]
    pub d: Option<usize>,
    /// Mean-center the difference vectors before the decomposition
    #[arg(long)]
    pub center: bool,
    /// Average template embeddings per value before differencing
    #[arg(long)]
    pub average_templates: bool,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub subspace: SubspaceArgs,
    /// Only used to pick the default d
    #[arg(long, default_value = "guide")]
    pub mode: Mode,
    /// Keep text feature rows as stored instead of L2-normalizing them
    #[arg(long)]
    pub raw: bool,
    /// Output prefix; writes `<prefix>.npy` and `<prefix>.json`
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, requires = "mode")]
    pub subspace: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Additional `mode:prefix` steps, applied after --subspace/--mode in order
    #[arg(long = "step", value_name = "MODE:PREFIX")]
    pub steps: Vec<String>,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Normal reference features (array file or manifest)
    #[arg(long)]
    pub train: PathBuf,
    /// Features to score (array file or manifest; manifest labels are echoed)
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long = "step", value_name = "MODE:PREFIX")]
    pub steps: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Manifest whose labels align with the scores; defaults to labels in the score file
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub subspace: SubspaceArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub mode: Mode,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Extra label sets for the test rows, `name=manifest.json`
    #[arg(long = "criterion", value_name = "NAME=MANIFEST")]
    pub criteria: Vec<String>,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub subspace: SubspaceArgs,
    #[arg(long)]
    pub train: PathBuf,
    /// Must carry labels
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub mode: Mode,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub d_list: Vec<usize>,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub output: PathBuf,
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::RenderPrompts(a) => cmd_render(&a),
        Command::BuildSubspace(a) => cmd_build_subspace(&a),
        Command::Transform(a) => cmd_transform(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Pipeline(a) => cmd_pipeline(&PipelineConfig::from_args(&a)?).map(|_| ()),
        Command::SweepD(a) => {
            let cfg = PipelineConfig {
                prompts: a.subspace.prompts.clone(),
                text_features: a.subspace.text_features.clone(),
                train: a.train.clone(),
                test: a.test.clone(),
                mode: a.mode,
                d: None,
                centered: a.subspace.center,
                average_templates: a.subspace.average_templates,
                k: a.k,
                criteria: Vec::new(),
                normalize: !a.raw,
                out_dir: PathBuf::new(),
            };
            cmd_sweep_d(&cfg, &a.d_list, &a.output).map(|_| ())
        }
    }
}

fn parse_pair<'a>(s: &'a str, what: &str) -> Result<(&'a str, &'a str)> {
    s.split_once(['=', ':'])
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| Error::Metadata(format!("expected {what}, got {s:?}")))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec::read(&a.spec)?;
    let mut normal = synth::first_values_normal(&spec);
    for entry in &a.normal {
        let (name, values) = parse_pair(entry, "NAME=VALUES")?;
        if !normal.contains_key(name) {
            return Err(Error::Synth(format!("unknown attribute {name:?}")));
        }
        normal.insert(
            name.to_string(),
            values.split(',').map(str::to_string).collect(),
        );
    }
    let world = synth::generate_world(&spec, a.samples)?;
    synth::write_world(&world, &normal, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct RenderedPrompts<'a> {
    rendered: &'a [String],
    digest: String,
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let prompts = PromptFile::read(&a.prompts)?.render()?;
    let json = report::to_json(&RenderedPrompts {
        rendered: prompts.rendered(),
        digest: prompts.digest(),
    });
    match &a.output {
        Some(path) => report::write_atomic(path, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn load_subspace_inputs(a: &SubspaceArgs, normalize: bool) -> Result<(PromptSet, EmbeddingMatrix)> {
    let prompts = PromptFile::read(&a.prompts)?.render()?;
    let text = tensor_io::load_matrix(&a.text_features, normalize)?;
    Ok((prompts, text))
}

fn cmd_build_subspace(a: &BuildArgs) -> Result<()> {
    let (prompts, text) = load_subspace_inputs(&a.subspace, !a.raw)?;
    let opts = SubspaceOptions {
        d: a.subspace.d.unwrap_or(a.mode.default_d()),
        centered: a.subspace.center,
        average_templates: a.subspace.average_templates,
    };
    let s = subspace::build_subspace(&prompts, &text, opts)?;
    subspace::save_subspace(&s, &a.output)?;
    println!("{}", s.digest());
    Ok(())
}

fn parse_steps(raw: &[String]) -> Result<Vec<(Mode, ConceptSubspace)>> {
    raw.iter()
        .map(|entry| {
            let (mode, prefix) = parse_pair(entry, "MODE:PREFIX")?;
            let mode = mode.parse::<Mode>().map_err(Error::Metadata)?;
            Ok((mode, subspace::load_subspace(prefix)?))
        })
        .collect()
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// An array file, or a manifest when the path ends in `.json`.
pub fn load_input(path: &Path, normalize: bool) -> Result<LabeledSet> {
    if is_manifest(path) {
        tensor_io::load_labeled_set_with(path, normalize)
    } else {
        LabeledSet::new(tensor_io::load_matrix(path, normalize)?, None, None)
    }
}

fn cmd_transform(a: &TransformArgs) -> Result<()> {
    let mut steps = Vec::new();
    if let (Some(prefix), Some(mode)) = (&a.subspace, a.mode) {
        steps.push((mode, subspace::load_subspace(prefix)?));
    }
    steps.extend(parse_steps(&a.steps)?);
    let spec = TransformSpec::new(steps)?;
    let input = load_input(&a.input, !a.raw)?;
    let out = transform::apply_transform(&input.embeddings, &spec)?;
    tensor_io::save_matrix(&out, &a.output)
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let train = load_input(&a.train, !a.raw)?;
    let test = load_input(&a.test, !a.raw)?;
    let cfg = ScoringConfig { k: a.k };
    let steps = parse_steps(&a.steps)?;
    let mut report = if steps.is_empty() {
        knn::score(&train.embeddings, &test.embeddings, &cfg)?
    } else {
        knn::score_pipeline(
            &train.embeddings,
            &test.embeddings,
            &TransformSpec::new(steps)?,
            &cfg,
        )?
    };
    report.labels = test.labels;
    report::write_json(&a.output, &report)
}

/// Labels of a manifest, without loading its array file.
pub fn read_labels(manifest_path: &Path) -> Result<Vec<u8>> {
    let manifest = Manifest::read(manifest_path)?;
    let raw = manifest
        .labels
        .ok_or_else(|| Error::Metadata(format!("{} has no labels", manifest_path.display())))?;
    raw.into_iter()
        .enumerate()
        .map(|(index, value)| match value {
            0 | 1 => Ok(value as u8),
            _ => Err(Error::InvalidLabel { index, value }),
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.scores).map_err(|e| Error::io(&a.scores, e))?;
    let scores: ScoreReport = serde_json::from_str(&text).map_err(|e| Error::json(&a.scores, e))?;
    let labels = match (&a.labels, scores.labels) {
        (Some(path), _) => read_labels(path)?,
        (None, Some(labels)) => labels,
        (None, None) => return Err(Error::Metadata("no labels: pass --labels".into())),
    };
    if labels.len() != scores.scores.len() {
        return Err(Error::LabelLengthMismatch {
            labels: labels.len(),
            rows: scores.scores.len(),
        });
    }
    report::write_json(&a.output, &metrics::evaluate(&scores.scores, &labels)?)
}

/// Free variables of the end-to-end run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub prompts: PathBuf,
    pub text_features: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub mode: Mode,
    /// `None` selects the mode's default.
    pub d: Option<usize>,
    pub centered: bool,
    pub average_templates: bool,
    pub k: usize,
    /// Named label manifests aligned with the test rows.
    pub criteria: Vec<(String, PathBuf)>,
    pub normalize: bool,
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_args(a: &PipelineArgs) -> Result<Self> {
        let criteria = a
            .criteria
            .iter()
            .map(|c| {
                let (name, path) = parse_pair(c, "NAME=MANIFEST")?;
                Ok((name.to_lowercase(), PathBuf::from(path)))
            })
            .collect::<Result<_>>()?;
        Ok(PipelineConfig {
            prompts: a.subspace.prompts.clone(),
            text_features: a.subspace.text_features.clone(),
            train: a.train.clone(),
            test: a.test.clone(),
            mode: a.mode,
            d: a.subspace.d,
            centered: a.subspace.center,
            average_templates: a.subspace.average_templates,
            k: a.k,
            criteria,
            normalize: !a.raw,
            out_dir: a.out.clone(),
        })
    }

    pub fn effective_d(&self) -> usize {
        self.d.unwrap_or(self.mode.default_d())
    }
}

struct PipelineInputs {
    prompts: PromptSet,
    text: EmbeddingMatrix,
    train: LabeledSet,
    test: LabeledSet,
    criteria: Vec<(String, Vec<u8>)>,
}

impl PipelineInputs {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let prompts = PromptFile::read(&cfg.prompts)?.render()?;
        let text = tensor_io::load_matrix(&cfg.text_features, cfg.normalize)?;
        let train = load_input(&cfg.train, cfg.normalize)?;
        let test = load_input(&cfg.test, cfg.normalize)?;
        ScoringConfig { k: cfg.k }.validate(train.embeddings.rows())?;
        let mut criteria = Vec::with_capacity(cfg.criteria.len());
        for (name, path) in &cfg.criteria {
            let labels = read_labels(path)?;
            if labels.len() != test.embeddings.rows() {
                return Err(Error::LabelLengthMismatch {
                    labels: labels.len(),
                    rows: test.embeddings.rows(),
                });
            }
            criteria.push((name.clone(), labels));
        }
        Ok(PipelineInputs {
            prompts,
            text,
            train,
            test,
            criteria,
        })
    }

    fn run(&self, cfg: &PipelineConfig, d: usize) -> Result<StageOutputs> {
        let opts = SubspaceOptions {
            d,
            centered: cfg.centered,
            average_templates: cfg.average_templates,
        };
        let subspace = subspace::build_subspace(&self.prompts, &self.text, opts)?;
        let spec = TransformSpec::single(cfg.mode, subspace);
        let train = transform::apply_transform(&self.train.embeddings, &spec)?;
        let test = transform::apply_transform(&self.test.embeddings, &spec)?;
        let mut scores = knn::score(&train, &test, &ScoringConfig { k: cfg.k })?;
        scores.transform = spec.digest_chain();
        scores.labels = self.test.labels.clone();
        Ok(StageOutputs {
            spec,
            train,
            test,
            scores,
        })
    }
}

struct StageOutputs {
    spec: TransformSpec,
    train: EmbeddingMatrix,
    test: EmbeddingMatrix,
    scores: ScoreReport,
}

/// Contents of `report.json` written by `pipeline`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: String,
    pub d: usize,
    pub k: usize,
    pub centered: bool,
    pub average_templates: bool,
    pub prompt_digest: String,
    pub subspace_digest: String,
    pub transform: String,
    pub train_rows: usize,
    pub test_rows: usize,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalReport>,
    /// `auroc_<name>`, `auprc_<name>`, `fpr95_<name>`, `positives_<name>`, `negatives_<name>`
    #[serde(flatten)]
    pub criteria: BTreeMap<String, Value>,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

impl PipelineReport {
    /// AUROC for a named criterion.
    pub fn criterion_auroc(&self, name: &str) -> Option<f64> {
        self.criteria
            .get(&format!("auroc_{}", name.to_lowercase()))
            .and_then(Value::as_f64)
    }
}

/// Runs render, difference, decomposition, transform, scoring and (when
/// labels exist) evaluation; writes the subspace, transformed features,
/// `scores.json` and finally `report.json` into the output directory.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let report_path = cfg.out_dir.join("report.json");
    if report_path.exists() {
        std::fs::remove_file(&report_path).map_err(|e| Error::io(&report_path, e))?;
    }
    let inputs = PipelineInputs::load(cfg)?;
    let d = cfg.effective_d();
    let out = inputs.run(cfg, d)?;

    let metrics = match &inputs.test.labels {
        Some(labels) => Some(metrics::evaluate(&out.scores.scores, labels)?),
        None => None,
    };
    let mut criteria = BTreeMap::new();
    for (name, labels) in &inputs.criteria {
        let m = metrics::evaluate(&out.scores.scores, labels)?;
        criteria.insert(format!("auroc_{name}"), Value::from(m.auroc));
        criteria.insert(format!("auprc_{name}"), Value::from(m.auprc));
        criteria.insert(format!("fpr95_{name}"), Value::from(m.fpr95));
        criteria.insert(format!("positives_{name}"), Value::from(m.positives));
        criteria.insert(format!("negatives_{name}"), Value::from(m.negatives));
    }
    let subspace = &out.spec.steps()[0].1;
    let report = PipelineReport {
        mode: cfg.mode.to_string(),
        d,
        k: cfg.k,
        centered: cfg.centered,
        average_templates: cfg.average_templates,
        prompt_digest: inputs.prompts.digest(),
        subspace_digest: subspace.digest(),
        transform: out.scores.transform.clone(),
        train_rows: out.train.rows(),
        test_rows: out.test.rows(),
        metrics,
        criteria,
        scores: out.scores.scores.clone(),
    };

    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    subspace::save_subspace(subspace, dir.join("subspace"))?;
    tensor_io::save_matrix(&out.train, dir.join("train_transformed.npy"))?;
    tensor_io::save_matrix(&out.test, dir.join("test_transformed.npy"))?;
    report::write_json(dir.join("scores.json"), &out.scores)?;
    report::write_json(&report_path, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub metrics: EvalReport,
}

/// Deduplicates `d_list` (first occurrence wins), warning on stderr.
pub fn dedup_d_list(d_list: &[usize]) -> Result<Vec<usize>> {
    if d_list.is_empty() {
        return Err(Error::InvalidComponents("empty d list".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(d_list.len());
    for &d in d_list {
        if seen.insert(d) {
            out.push(d);
        } else {
            eprintln!("warning: duplicate d = {d} ignored");
        }
    }
    Ok(out)
}

/// One metrics row per `d` (scored against the test labels), written as
/// CSV `d,auroc,auprc,fpr95`. Any failing `d` aborts the sweep.
pub fn cmd_sweep_d(cfg: &PipelineConfig, d_list: &[usize], output: &Path) -> Result<Vec<SweepRow>> {
    let d_list = dedup_d_list(d_list)?;
    let inputs = PipelineInputs::load(cfg)?;
    let labels = inputs
        .test
        .labels
        .as_ref()
        .ok_or_else(|| Error::Metadata("sweep needs a labeled test manifest".into()))?;
    let mut rows = Vec::with_capacity(d_list.len());
    for d in d_list {
        let out = inputs.run(cfg, d)?;
        rows.push(SweepRow {
            d,
            metrics: metrics::evaluate(&out.scores.scores, labels)?,
        });
    }
    let mut csv = String::from("d,auroc,auprc,fpr95\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.d,
            format_sig17(r.metrics.auroc),
            format_sig17(r.metrics.auprc),
            format_sig17(r.metrics.fpr95)
        ));
    }
    report::write_atomic(output, &csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_list_dedup() {
        assert_eq!(dedup_d_list(&[8, 2, 8, 32, 2]).unwrap(), vec![8, 2, 32]);
        assert!(dedup_d_list(&[]).is_err());
    }

    #[test]
    fn pair_parsing() {
        assert_eq!(
            parse_pair("guide:/tmp/s", "x").unwrap(),
            ("guide", "/tmp/s")
        );
        assert_eq!(parse_pair("a=b,c", "x").unwrap(), ("a", "b,c"));
        assert!(parse_pair("guide", "x").is_err());
        assert!(parse_pair("=x", "x").is_err());
    }

    #[test]
    fn clap_definitions_are_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
