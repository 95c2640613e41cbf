use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use voxsel_core::pipeline::{
    cluster_corpus, emit_transcriber_request, label_pending, oracle_labels, score_pool, select_batch,
    select_initial, transcriber_request,
};
use voxsel_core::sim::{
    corruption_rates, generate_corpus, mock_committee, run_simulation, EntropyModel, MockTranscriberSpec,
    SimulationReport, SimulationSpec, SyntheticCorpusSpec,
};
use voxsel_core::store::{
    load_committee, load_embeddings, load_manifest, load_state, read_json, read_jsonl, save_committee,
    save_manifest, save_state, write_embeddings_binary, write_json, write_jsonl, StateLock,
};
use voxsel_core::{
    silhouette, EmbeddingMatrix, Error, Metric, PipelineConfig, PipelineState, Result, SampleId, ScoreDigest,
    Stage2Outcome, Strategy, TranscriberRequest,
};

#[derive(Debug, Parser)]
#[command(name = "voxsel", version, about = "Active-learning sample selection for speech transcription")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    /// Cold-start draw from the clusters.
    Initial,
    /// Scored batch for the current iteration.
    Batch,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and its embeddings and write a fresh state.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out_state: PathBuf,
        /// Pipeline configuration (JSON); defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Cluster the embeddings and store the assignment in the state.
    Cluster {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        min_points: Option<usize>,
        #[arg(long)]
        metric: Option<Metric>,
        /// Also write the per-sample cluster table (JSONL).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Select the next batch and emit the transcriber request.
    Select {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the transcriber request; next to the state by default.
        #[arg(long)]
        request_out: Option<PathBuf>,
    },
    /// Score the pool from a committee file.
    Score {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        committee: PathBuf,
        /// Scoring threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Apply labels to the pending batch and advance the iteration.
    Label {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
        oracle: bool,
        /// JSONL with one `{"id": ..., "text": ...}` per line.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Run the multi-seed simulation and write its report.
    Simulate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-iteration summary of a state.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the annotation API for a state.
    Serve {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory audio files may be served from.
        #[arg(long)]
        media_root: Option<PathBuf>,
    },
    /// Write a synthetic corpus (manifest, embeddings, spec) to a directory.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Answer a transcriber request with mock committee outputs for a
    /// synthetic corpus.
    MockCommittee {
        /// The `corpus-spec.json` written by `synth`.
        #[arg(long)]
        corpus_spec: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Scores persisted by `score` for the following `select --stage batch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub iteration: u32,
    pub strategy: Strategy,
    pub scores: BTreeMap<SampleId, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: SampleId,
    pub text: String,
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Ingest {
            manifest,
            embeddings,
            out_state,
            config,
            force,
        } => ingest(&manifest, &embeddings, &out_state, config.as_deref(), force),
        Command::Cluster {
            state,
            eps,
            min_points,
            metric,
            table,
        } => cluster(&state, eps, min_points, metric, table.as_deref()),
        Command::Select {
            state,
            stage,
            strategy,
            target,
            seed,
            request_out,
        } => select(&state, stage, strategy, target, seed, request_out),
        Command::Score {
            state,
            committee,
            workers,
        } => score(&state, &committee, workers),
        Command::Label { state, labels, .. } => label(&state, labels.as_deref()),
        Command::Simulate {
            spec,
            seeds,
            strategies,
            out,
        } => simulate(spec.as_deref(), seeds, strategies, out.as_deref()),
        Command::Report { state, json } => report(&state, json),
        Command::Serve {
            state,
            port,
            host,
            media_root,
        } => crate::server::run_blocking(&state, &host, port, media_root),
        Command::Synth { spec, seed, out_dir } => synth(spec.as_deref(), seed, &out_dir),
        Command::MockCommittee {
            corpus_spec,
            state,
            request,
            out,
            seed,
        } => mock(&corpus_spec, &state, &request, &out, seed),
    }
}

/// Loads the state under the writer lock, applies `f` and saves only if
/// `f` succeeded.
fn mutate<T>(path: &Path, f: impl FnOnce(&mut PipelineState) -> Result<T>) -> Result<T> {
    let _lock = StateLock::acquire(path)?;
    let mut state = load_state(path)?;
    let out = f(&mut state)?;
    save_state(&state, path)?;
    Ok(out)
}

fn sibling(state_path: &Path, name: &str) -> PathBuf {
    state_path.with_file_name(name)
}

fn state_stem(state_path: &Path) -> String {
    state_path
        .file_stem()
        .map_or_else(|| "state".into(), |s| s.to_string_lossy().into_owned())
}

fn ingest(manifest: &Path, embeddings: &Path, out: &Path, config: Option<&Path>, force: bool) -> Result<String> {
    if out.exists() && !force {
        return Err(Error::InvalidParameter(format!(
            "{} already exists; pass --force to replace it",
            out.display()
        )));
    }
    let _lock = StateLock::acquire(out)?;
    let corpus = load_manifest(manifest)?;
    let raw = load_embeddings(embeddings)?;
    corpus.validate(Some(raw.rows))?;
    EmbeddingMatrix::from_manifest(&corpus, &raw)?;
    let config: PipelineConfig = match config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    let mut state = PipelineState::new(corpus, config);
    let abs = fs::canonicalize(embeddings).map_err(|e| Error::io(embeddings, e))?;
    state.embeddings_path = Some(abs.to_string_lossy().into_owned());
    save_state(&state, out)?;
    Ok(format!(
        "ingested {} samples ({}-dim embeddings) into {}",
        state.corpus.len(),
        raw.dim,
        out.display()
    ))
}

fn load_matrix(state: &PipelineState) -> Result<EmbeddingMatrix> {
    let path = state
        .embeddings_path
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("state records no embeddings path".into()))?;
    EmbeddingMatrix::from_manifest(&state.corpus, &load_embeddings(path)?)
}

fn cluster(
    path: &Path,
    eps: Option<f64>,
    min_points: Option<usize>,
    metric: Option<Metric>,
    table: Option<&Path>,
) -> Result<String> {
    mutate(path, |state| {
        if let Some(p) = &state.pending_batch {
            return Err(Error::PendingBatch(p.iteration));
        }
        let mut config = state.config.clone();
        if eps.is_some() {
            config.cluster.eps = eps;
        }
        if let Some(m) = min_points {
            config.cluster.min_points = m;
        }
        if let Some(m) = metric {
            config.cluster.metric = m;
        }
        config.validate()?;
        let matrix = load_matrix(state)?;
        let assignment = cluster_corpus(&config, &matrix)?;
        let sil = silhouette(&matrix, &assignment).ok();
        if let Some(t) = table {
            write_jsonl(t, &assignment.table())?;
        }
        let mut msg = format!(
            "{} clusters, {} noise points (eps {:.6}, min_points {}, {:?})",
            assignment.num_clusters(),
            assignment.noise.len(),
            assignment.params.eps,
            assignment.params.min_points,
            assignment.params.metric
        );
        if let Some(s) = sil {
            let _ = write!(msg, ", silhouette {s:.4}");
        }
        state.config_hash = config.hash();
        state.config = config;
        state.clusters = Some(assignment);
        Ok(msg)
    })
}

fn select(
    path: &Path,
    stage: Stage,
    strategy: Option<Strategy>,
    target: Option<usize>,
    seed: Option<u64>,
    request_out: Option<PathBuf>,
) -> Result<String> {
    let request_path = request_out.unwrap_or_else(|| sibling(path, &format!("{}.request.json", state_stem(path))));
    mutate(path, |state| {
        if let Some(p) = &state.pending_batch {
            return Err(Error::PendingBatch(p.iteration));
        }
        let mut config = state.config.clone();
        if let Some(s) = strategy {
            config.strategy = s;
        }
        if let Some(t) = target {
            config.target_per_iteration = t;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        if config != state.config {
            state.config_hash = config.hash();
            state.config = config;
        }
        let batch = match stage {
            Stage::Initial => {
                if state.clusters.is_none() {
                    return Err(Error::MissingClusters);
                }
                if state.iteration != 0 {
                    return Err(Error::InvalidParameter(format!(
                        "the cold start was already labeled; state is at iteration {}",
                        state.iteration
                    )));
                }
                select_initial(state)?
            }
            Stage::Batch => {
                let scores = stored_scores(path, state)?;
                match select_batch(state, &scores)? {
                    Stage2Outcome::Complete => {
                        return Ok(format!("all {} iterations complete", state.config.iterations));
                    }
                    Stage2Outcome::Selected { batch, .. } => batch,
                }
            }
        };
        state.pending_batch = Some(batch.clone());
        let req = emit_transcriber_request(state, &request_path)?;
        let mut msg = format!(
            "selected {} samples for iteration {} ({})",
            batch.len(),
            batch.iteration,
            batch.strategy
        );
        if !req.ids.is_empty() {
            let _ = write!(
                msg,
                "; requested committee outputs for {} ids in {}",
                req.ids.len(),
                request_path.display()
            );
        }
        Ok(msg)
    })
}

/// Scores written by `score` for the current iteration. Strategies that
/// need no committee get an empty map.
fn stored_scores(path: &Path, state: &PipelineState) -> Result<BTreeMap<SampleId, f64>> {
    if !state.config.strategy.needs_committee() || state.iteration > state.config.iterations {
        return Ok(BTreeMap::new());
    }
    let file = match &state.score_file {
        Some(name) => {
            let f: ScoreFile = read_json(sibling(path, name))?;
            Some(f).filter(|f| f.iteration == state.iteration && f.strategy == state.config.strategy)
        }
        None => None,
    };
    match file {
        Some(f) => Ok(f.scores),
        None => Err(Error::MissingScores(transcriber_request(state)?.ids)),
    }
}

fn score(path: &Path, committee: &Path, workers: usize) -> Result<String> {
    let workers = if workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        workers
    };
    mutate(path, |state| {
        if let Some(p) = &state.pending_batch {
            return Err(Error::PendingBatch(p.iteration));
        }
        if state.iteration > state.config.iterations {
            return Ok(format!("all {} iterations complete; nothing to score", state.config.iterations));
        }
        let artifacts = load_committee(committee, state.config.committee_size)?;
        let scores = score_pool(state, &artifacts, workers)?;
        let name = format!("{}.scores.json", state_stem(path));
        let digest = ScoreDigest::from_values(scores.values().copied());
        write_json(
            sibling(path, &name),
            &ScoreFile {
                iteration: state.iteration,
                strategy: state.config.strategy,
                scores,
            },
        )?;
        state.score_file = Some(name);
        Ok(match digest {
            Some(d) => format!(
                "scored {} samples for iteration {}: median {:.4}, quartiles {:.4}..{:.4}",
                d.count, state.iteration, d.median, d.q1, d.q3
            ),
            None => format!("no scores needed for iteration {} ({})", state.iteration, state.config.strategy),
        })
    })
}

fn label(path: &Path, labels: Option<&Path>) -> Result<String> {
    mutate(path, |state| {
        let labels = match labels {
            None => oracle_labels(state)?,
            Some(file) => {
                let mut out = BTreeMap::new();
                for rec in read_jsonl::<LabelRecord>(file)? {
                    if out.insert(rec.id.clone(), rec.text).is_some() {
                        return Err(Error::DuplicateId(rec.id));
                    }
                }
                out
            }
        };
        let next = label_pending(state, &labels)?;
        let n = labels.len();
        *state = next;
        Ok(format!(
            "labeled {n} samples; now at iteration {} ({} labeled, {} unlabeled)",
            state.iteration,
            state.labeled_ids.len(),
            state.unlabeled_ids.len()
        ))
    })
}

fn simulate(
    spec: Option<&Path>,
    seeds: Option<usize>,
    strategies: Option<Vec<Strategy>>,
    out: Option<&Path>,
) -> Result<String> {
    let mut spec: SimulationSpec = match spec {
        Some(p) => read_json(p)?,
        None => SimulationSpec::default(),
    };
    if let Some(n) = seeds {
        spec.seeds = n;
    }
    if let Some(s) = strategies {
        spec.strategies = s;
    }
    if spec.seeds == 0 || spec.strategies.is_empty() {
        return Err(Error::InvalidParameter("need at least one seed and one strategy".into()));
    }
    let report = run_simulation(&spec)?;
    match out {
        Some(p) => {
            write_json(p, &report)?;
            Ok(report_table(&report))
        }
        None => serde_json::to_string_pretty(&report).map_err(|e| Error::StateFormat(e.to_string())),
    }
}

fn report_table(report: &SimulationReport) -> String {
    let mut s = String::from("strategy              h  proxy_mean  proxy_ci  median_U\n");
    for (strategy, rows) in &report.strategies {
        for r in rows {
            let median = r
                .uncertainty_quartiles
                .map_or_else(|| "-".to_string(), |q| format!("{:.4}", q[1]));
            let _ = writeln!(
                s,
                "{:<20} {:>2}  {:>10.4}  {:>8.4}  {:>8}",
                strategy.as_str(),
                r.iteration,
                r.proxy_metric_mean,
                r.proxy_metric_ci,
                median
            );
        }
    }
    s.pop();
    s
}

fn report(path: &Path, json: bool) -> Result<String> {
    let state = load_state(path)?;
    if json {
        return serde_json::to_string_pretty(&state.history).map_err(|e| Error::StateFormat(e.to_string()));
    }
    let mut s = format!(
        "strategy {}, iteration {} of {}, {} labeled, {} unlabeled",
        state.config.strategy,
        state.iteration,
        state.config.iterations,
        state.labeled_ids.len(),
        state.unlabeled_ids.len()
    );
    if let Some(p) = &state.pending_batch {
        let _ = write!(s, ", {} pending for iteration {}", p.len(), p.iteration);
    }
    s.push_str("\n  h  strategy              batch  pool_q1  pool_med  pool_q3");
    for h in &state.history {
        let q = |f: fn(&ScoreDigest) -> f64| h.pool_scores.as_ref().map_or_else(|| "-".into(), |d| format!("{:.4}", f(d)));
        let _ = write!(
            s,
            "\n{:>3}  {:<20} {:>6}  {:>7}  {:>8}  {:>7}",
            h.iteration,
            h.strategy.as_str(),
            h.batch_size,
            q(|d| d.q1),
            q(|d| d.median),
            q(|d| d.q3)
        );
    }
    Ok(s)
}

fn synth(spec: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> Result<String> {
    let mut spec: SyntheticCorpusSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticCorpusSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_corpus(&spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_manifest(&corpus.manifest, out_dir.join("manifest.jsonl"))?;
    write_embeddings_binary(&corpus.raw_embeddings(), out_dir.join("embeddings.xvec"))?;
    write_json(out_dir.join("corpus-spec.json"), &spec)?;
    Ok(format!(
        "wrote {} samples in {} planted clusters ({} held-out test points) to {}",
        corpus.manifest.len(),
        spec.points_per_cluster.len(),
        corpus.test_points.len(),
        out_dir.display()
    ))
}

fn mock(corpus_spec: &Path, state: &Path, request: &Path, out: &Path, seed: u64) -> Result<String> {
    let spec: SyntheticCorpusSpec = read_json(corpus_spec)?;
    let corpus = generate_corpus(&spec)?;
    let state = load_state(state)?;
    if corpus.manifest.ids() != state.corpus.ids() {
        return Err(Error::InvalidParameter("corpus spec does not match the state's corpus".into()));
    }
    let req: TranscriberRequest = read_json(request)?;
    let rates = corruption_rates(&corpus, &state.labeled_ids, &req.ids);
    let mock = MockTranscriberSpec {
        per_sample_corruption: rates,
        committee_size: req.expected_t,
        seed: seed ^ u64::from(req.iteration),
        entropy: EntropyModel::default(),
    };
    let artifacts = mock_committee(&corpus.manifest, &mock, spec.vocab_size)?;
    save_committee(artifacts.values(), out)?;
    Ok(format!(
        "wrote {} committee records (T={}) for iteration {} to {}",
        artifacts.len(),
        req.expected_t,
        req.iteration,
        out.display()
    ))
}
