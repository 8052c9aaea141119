use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cpodrift::counterfactual::{mine_record, CounterfactualSpec, MiningResult, VisualPool};
use cpodrift::cpo::Ablation;
use cpodrift::cpo::{parse_pairs, train, write_pairs, PairKind, PreferencePair, TrainConfig};
use cpodrift::drift::{counterfactual_probe, drift_report, DriftConfig, DriftReport};
use cpodrift::graph::ConceptGraph;
use cpodrift::policy::{FeatureMapConfig, PolicyParams, PolicySnapshot};
use cpodrift::robustness::{eval_robustness, RobustnessTable};
use cpodrift::seed::{derive_seed, stream};
use cpodrift::study::{
    held_out_records, run_study, supervised_policy, thinking_pairs, Arm, HeadWeights, StudyConfig,
};
use cpodrift::supervised::MleConfig;
use cpodrift::trace::{
    extract_attribute_mentions, write_records, AttributeLexicon, DEFAULT_SINK_MASK,
};
use cpodrift::world::{generate_records, generate_world, GoldRecord, WorldConfig};

use crate::args::*;
use crate::artifacts::{Manifest, Run, MANIFEST_FILE};
use crate::error::CliError;

/// Runs one command into `out` and returns its completed manifest.
pub fn execute(command: &Command, out: &Path) -> Result<Manifest, CliError> {
    if let Command::Replay(args) = command {
        return replay(args, out);
    }
    let mut run = Run::begin(out, command)?;
    match command {
        Command::GraphValidate(a) => graph_validate(&mut run, a)?,
        Command::GenWorld(a) => gen_world(&mut run, a)?,
        Command::Sft(a) => sft(&mut run, a)?,
        Command::SynthCf(a) => synth_cf(&mut run, a)?,
        Command::MineVisual(a) => mine_visual(&mut run, a)?,
        Command::DriftReport(a) => drift(&mut run, a)?,
        Command::Probe(a) => probe(&mut run, a)?,
        Command::Train(a) => train_command(&mut run, a)?,
        Command::EvalRobustness(a) => eval_command(&mut run, a)?,
        Command::Study(a) => study(&mut run, a)?,
        Command::Replay(_) => unreachable!("handled above"),
    }
    run.finish()
}

fn replay(args: &ReplayArgs, out: &Path) -> Result<Manifest, CliError> {
    let recorded = Manifest::load(&args.manifest)?;
    if matches!(recorded.command, Command::Replay(_)) {
        return Err(CliError::Validation(
            "a replay manifest cannot itself be replayed".into(),
        ));
    }
    if out.join(MANIFEST_FILE) == args.manifest {
        return Err(CliError::Usage(
            "replay needs an output directory other than the recorded run's".into(),
        ));
    }
    let fresh = execute(&recorded.command, out)?;
    if fresh.inputs != recorded.inputs {
        return Err(CliError::Validation(
            "inputs changed since the recorded run".into(),
        ));
    }
    if fresh.outputs != recorded.outputs {
        let differing: Vec<&str> = fresh
            .outputs
            .iter()
            .filter(|f| !recorded.outputs.contains(f))
            .map(|f| f.path.as_str())
            .collect();
        return Err(CliError::Validation(format!(
            "outputs differ from the recorded run: {differing:?}"
        )));
    }
    println!("replay matched {} outputs", fresh.outputs.len());
    Ok(fresh)
}

fn lexicon(
    graph: &ConceptGraph,
    vocab: &cpodrift::Vocabulary,
) -> Result<AttributeLexicon, CliError> {
    Ok(AttributeLexicon::build(graph, vocab)?)
}

fn graph_validate(run: &mut Run, args: &GraphValidateArgs) -> Result<(), CliError> {
    let text = run.read_input(&args.graph)?;
    let (_, report) =
        ConceptGraph::load_and_validate(&text).map_err(|e| CliError::in_file(&args.graph, e))?;
    println!(
        "{}: {} entities, {} attributes, {} relations, {} categories, {} warnings",
        args.graph.display(),
        report.entities,
        report.attributes,
        report.relations,
        report.categories,
        report.warnings.len()
    );
    for w in &report.warnings {
        println!("warning: {w}");
    }
    run.write_json("validation.json", &report)
}

#[derive(Serialize)]
struct WorldSummary<'a> {
    seed: u64,
    config: &'a WorldConfig,
    records: &'a [GoldRecord],
}

fn gen_world(run: &mut Run, args: &GenWorldArgs) -> Result<(), CliError> {
    let config = WorldConfig {
        entities: args.entities,
        attributes_per_entity: args.attributes_per_entity,
        categories: args.categories,
        vocab_size: args.vocab_size,
        max_len: args.max_len,
        drift_states: args.drift_states,
        rho: args.rho,
        records: args.records,
        seed: args.seed,
    };
    let world = generate_world(&config, &mut stream(args.seed, "world"))?;
    let gold = generate_records(&world, &mut stream(args.seed, "records"))?;
    run.write_output("graph.json", world.graph.to_json().as_bytes())?;
    run.write_output("vocab.txt", world.vocab.to_text().as_bytes())?;
    run.write_output(
        "records.jsonl",
        write_records(gold.iter().map(|g| &g.record)).as_bytes(),
    )?;
    run.write_json(
        "world.json",
        &WorldSummary {
            seed: args.seed,
            config: &config,
            records: &gold,
        },
    )?;
    if args.eval_records > 0 {
        let eval = held_out_records(&world, args.eval_records, args.seed)?;
        run.write_output("eval.jsonl", write_records(&eval).as_bytes())?;
    }
    println!(
        "world: {} entities, {} attributes, {} records",
        world.graph.entities().len(),
        world.graph.attributes().len(),
        gold.len()
    );
    Ok(())
}

fn sft(run: &mut Run, args: &SftArgs) -> Result<(), CliError> {
    let graph = run.load_graph(&args.graph)?;
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let lexicon = lexicon(&graph, &vocab)?;
    let attributes = graph.attributes().iter().map(|a| a.id.clone()).collect();
    let labels = graph.entities().iter().map(|e| e.id.clone()).collect();
    let zero = PolicyParams::zeros(
        FeatureMapConfig::new(args.context_window, vocab.len(), attributes, true),
        vocab.markers(),
        labels,
    )?;
    let mle = MleConfig {
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: derive_seed(args.seed, "sft"),
    };
    let head = HeadWeights {
        visual: args.head_visual_weight,
        token: args.head_token_weight,
    };
    let policy = supervised_policy(&zero, &records, &graph, &lexicon, &mle, head)?;
    run.write_output("checkpoint.json", policy.to_checkpoint_json().as_bytes())?;
    println!("fitted policy on {} records", records.len());
    Ok(())
}

#[derive(Serialize)]
struct SynthesisSummary {
    records: usize,
    pairs: usize,
    skipped: Vec<String>,
    shortfalls: BTreeMap<String, (usize, usize)>,
}

fn synth_cf(run: &mut Run, args: &SynthCfArgs) -> Result<(), CliError> {
    let graph = run.load_graph(&args.graph)?;
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let lexicon = lexicon(&graph, &vocab)?;
    let spec = CounterfactualSpec {
        n: args.n,
        max_substitutions: args.max_substitutions,
        category: args.category.clone(),
        seed: args.seed,
    };
    let out = thinking_pairs(
        &records,
        &graph,
        &lexicon,
        &spec,
        &mut stream(args.seed, "synthesis"),
    )?;
    run.write_output("pairs.jsonl", write_pairs(&out.pairs).as_bytes())?;
    run.write_json(
        "synthesis.json",
        &SynthesisSummary {
            records: records.len(),
            pairs: out.pairs.len(),
            skipped: out.skipped.clone(),
            shortfalls: out
                .shortfalls
                .iter()
                .map(|(id, s)| (id.clone(), (s.requested, s.found)))
                .collect(),
        },
    )?;
    println!(
        "{} thinking pairs from {} records ({} short, {} without mentions)",
        out.pairs.len(),
        records.len(),
        out.shortfalls.len(),
        out.skipped.len()
    );
    Ok(())
}

fn mine_visual(run: &mut Run, args: &MineVisualArgs) -> Result<(), CliError> {
    let policy = run.load_checkpoint(&args.checkpoint)?;
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let pool = VisualPool::new(records.iter().map(|r| r.visual.clone()).collect())?;
    let mut rng = stream(args.seed, "mining");
    let mut pairs = Vec::new();
    let mut mined: Vec<MiningResult> = Vec::new();
    for record in &records {
        for _ in 0..args.draws {
            let Some(result) = mine_record(
                &policy,
                record,
                &pool,
                args.k,
                args.max_len,
                args.temperature,
                &mut rng,
            )?
            else {
                continue;
            };
            if let Some(hard) = &result.outcome.hard_negative {
                pairs.push(PreferencePair::perception(
                    record,
                    hard.distractor.clone(),
                    result.initial_trace.clone(),
                    Some(hard.margin),
                )?);
            }
            mined.push(result);
        }
    }
    run.write_output("pairs.jsonl", write_pairs(&pairs).as_bytes())?;
    run.write_json_lines("mining.jsonl", &mined)?;
    println!(
        "{} perception pairs from {} draws",
        pairs.len(),
        mined.len()
    );
    Ok(())
}

fn drift_config(args: &DriftArgs, sink_default: usize) -> Result<DriftConfig, CliError> {
    let config = DriftConfig {
        divergence: args.divergence.into(),
        threshold: args.threshold,
        window: args.window,
        sink_mask: args.sink_mask.unwrap_or(sink_default),
        smoothing: args.smoothing,
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct EventRow<'a> {
    record_id: &'a str,
    position: usize,
    channel: cpodrift::drift::Channel,
    magnitude: f64,
}

fn drift(run: &mut Run, args: &DriftReportArgs) -> Result<(), CliError> {
    let policy = args
        .checkpoint
        .as_deref()
        .map(|p| run.load_checkpoint(p))
        .transpose()?;
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let mut reports: Vec<DriftReport> = Vec::with_capacity(records.len());
    for record in &records {
        let z = match (&record.z, &policy) {
            (Some(z), _) => z.clone(),
            (None, Some(p)) => p.label_stream(&record.visual, &record.prompt, &record.trace)?,
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "record {} has no recorded states; pass --checkpoint",
                    record.record_id
                )))
            }
        };
        let (frames, sink_default) = match (&record.attention, &policy) {
            (Some(frames), _) => (Some(frames.clone()), DEFAULT_SINK_MASK),
            (None, Some(p)) => (p.attention_frames(&record.visual, &record.trace)?, 0),
            (None, None) => (None, DEFAULT_SINK_MASK),
        };
        let config = drift_config(&args.drift, sink_default)?;
        reports.push(drift_report(
            &record.record_id,
            record.trace.open_position(),
            &z,
            frames.as_deref(),
            &config,
        )?);
    }
    let events: Vec<EventRow> = reports
        .iter()
        .flat_map(|r| {
            r.events.iter().map(|e| EventRow {
                record_id: &r.record_id,
                position: e.position,
                channel: e.channel,
                magnitude: e.magnitude,
            })
        })
        .collect();
    println!("{} events over {} records", events.len(), reports.len());
    run.write_csv("events.csv", &events)?;
    run.write_json_lines("drift.jsonl", &reports)
}

fn probe(run: &mut Run, args: &ProbeArgs) -> Result<(), CliError> {
    let graph = run.load_graph(&args.graph)?;
    let policy = run.load_checkpoint(&args.checkpoint)?;
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let lexicon = lexicon(&graph, &vocab)?;
    let record = records
        .iter()
        .find(|r| r.record_id == args.record_id)
        .ok_or_else(|| CliError::Validation(format!("no record {:?}", args.record_id)))?;
    let mentions = extract_attribute_mentions(&record.trace, &lexicon);
    let mention = mentions.get(args.mention).ok_or_else(|| {
        CliError::Validation(format!(
            "record {} has {} mentions; index {} is out of range",
            record.record_id,
            mentions.len(),
            args.mention
        ))
    })?;
    let replacement = match &args.replacement {
        Some(r) => r.clone(),
        None => graph
            .substitution_set(&mention.attribute, &record.gold_label)?
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| {
                CliError::Validation(format!("{} has no substitutes", mention.attribute))
            })?,
    };
    let config = drift_config(
        &args.drift,
        if record.attention.is_some() {
            DEFAULT_SINK_MASK
        } else {
            0
        },
    )?;
    let report = counterfactual_probe(
        &policy,
        &record.visual,
        &record.prompt,
        &record.trace,
        &lexicon,
        mention,
        &replacement,
        &config,
    )?;
    println!(
        "{} -> {}: max label shift {:.4}",
        report.mention,
        report.replacement,
        report.deltas.iter().fold(0.0f64, |m, d| m.max(d.abs()))
    );
    run.write_json("probe.json", &report)
}

#[derive(Serialize)]
struct TrainSummary {
    pairs: usize,
    thinking_pairs: usize,
    perception_pairs: usize,
    history: Vec<cpodrift::cpo::EpochStats>,
}

fn train_command(run: &mut Run, args: &TrainArgs) -> Result<(), CliError> {
    let start = run.load_checkpoint(&args.checkpoint)?;
    let reference = match &args.ref_checkpoint {
        Some(p) => run.load_checkpoint(p)?,
        None => start.clone(),
    };
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let mut pairs = Vec::new();
    for path in &args.pairs {
        let text = run.read_input(path)?;
        pairs.extend(
            parse_pairs(text.as_bytes(), &records, vocab.markers())
                .map_err(|e| CliError::in_file(path, e))?,
        );
    }
    let config = TrainConfig {
        beta: args.beta,
        lr: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        window: args.window,
        seed: derive_seed(args.seed, "training"),
        ablation: Ablation::from(args.ablation),
    };
    let (trained, history) = train(&start, &PolicySnapshot::freeze(&reference), &pairs, &config)?;
    run.write_output("checkpoint.json", trained.to_checkpoint_json().as_bytes())?;
    let count = |k| pairs.iter().filter(|p| p.kind() == k).count();
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs on {} pairs: loss {:.4}, reward accuracy {:.3}",
            history.len(),
            pairs.len(),
            last.stats.loss,
            last.stats.reward_accuracy
        );
    }
    run.write_json(
        "history.json",
        &TrainSummary {
            pairs: pairs.len(),
            thinking_pairs: count(PairKind::ThinkingCf),
            perception_pairs: count(PairKind::PerceptionCf),
            history,
        },
    )
}

/// Mean accuracy per ratio and the drop from the first to the last ratio,
/// per checkpoint.
#[derive(Serialize)]
struct CheckpointSummary {
    mean_accuracy: Vec<(f64, f64)>,
    drop: f64,
}

fn summarize(
    table: &RobustnessTable,
    names: &[String],
    ratios: &[f64],
    seeds: &[u64],
) -> BTreeMap<String, CheckpointSummary> {
    let (first, last) = (ratios[0], ratios[ratios.len() - 1]);
    names
        .iter()
        .map(|name| {
            let mean_accuracy = ratios
                .iter()
                .map(|&r| {
                    let total: f64 = seeds
                        .iter()
                        .filter_map(|&s| table.accuracy(name, r, s))
                        .sum();
                    (r, total / seeds.len() as f64)
                })
                .collect();
            let drop = table.mean_drop(name, first, last).unwrap_or(0.0);
            (
                name.clone(),
                CheckpointSummary {
                    mean_accuracy,
                    drop,
                },
            )
        })
        .collect()
}

fn write_table(
    run: &mut Run,
    table: &RobustnessTable,
    names: &[String],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<(), CliError> {
    run.write_csv("accuracy.csv", &table.rows)?;
    run.write_json_lines("predictions.jsonl", &table.predictions)?;
    let summary = summarize(table, names, ratios, seeds);
    for (name, s) in &summary {
        println!("{name:24} drop {:.4}", s.drop);
    }
    run.write_json("summary.json", &summary)
}

fn checkpoint_name(spec: &str) -> Result<(String, PathBuf), CliError> {
    if let Some((name, path)) = spec.split_once('=') {
        if name.is_empty() || path.is_empty() {
            return Err(CliError::Usage(format!(
                "bad checkpoint spec {spec:?}; expected name=path"
            )));
        }
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(spec);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("cannot name checkpoint {spec:?}")))?;
    Ok((name, path))
}

fn check_ratios(ratios: &[f64], seeds: &[u64]) -> Result<(), CliError> {
    if ratios.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage(
            "--ratios and --seeds must be nonempty".into(),
        ));
    }
    Ok(())
}

fn eval_command(run: &mut Run, args: &EvalRobustnessArgs) -> Result<(), CliError> {
    check_ratios(&args.ratios, &args.seeds)?;
    let graph = run.load_graph(&args.graph)?;
    let vocab = run.load_vocab(&args.input)?;
    let records = run.load_records(&args.input.records, vocab.markers())?;
    let lexicon = lexicon(&graph, &vocab)?;
    let mut checkpoints = Vec::new();
    for spec in &args.checkpoint {
        let (name, path) = checkpoint_name(spec)?;
        if checkpoints
            .iter()
            .any(|(n, _): &(String, PolicyParams)| *n == name)
        {
            return Err(CliError::Usage(format!(
                "checkpoint name {name:?} used twice"
            )));
        }
        checkpoints.push((name, run.load_checkpoint(&path)?));
    }
    let table = eval_robustness(
        &checkpoints,
        &records,
        &graph,
        &lexicon,
        &args.ratios,
        &args.seeds,
        args.target.into(),
    )?;
    let names: Vec<String> = checkpoints.into_iter().map(|(n, _)| n).collect();
    write_table(run, &table, &names, &args.ratios, &args.seeds)
}

#[derive(Serialize)]
struct StudySummary {
    thinking_pairs: usize,
    perception_pairs: usize,
    steps: usize,
    drops: BTreeMap<String, f64>,
}

pub const STUDY_ARMS: [Arm; 5] = [
    Arm::MaxLikelihood,
    Arm::RandomNegatives,
    Arm::Counterfactual(Ablation::Both),
    Arm::Counterfactual(Ablation::ThinkingOnly),
    Arm::Counterfactual(Ablation::PerceptionOnly),
];

fn study(run: &mut Run, args: &StudyArgs) -> Result<(), CliError> {
    check_ratios(&args.ratios, &args.seeds)?;
    let defaults = StudyConfig::default();
    let config = StudyConfig {
        seed: args.seed,
        world: WorldConfig {
            records: args.records,
            ..defaults.world.clone()
        },
        eval_records: args.eval_records,
        train: TrainConfig {
            beta: args.beta,
            lr: args.lr,
            epochs: args.epochs,
            window: args.window,
            ..defaults.train.clone()
        },
        ratios: args.ratios.clone(),
        eval_seeds: args.seeds.clone(),
        ..defaults
    };
    let outcome = run_study(&config, &STUDY_ARMS)?;
    let names: Vec<String> = outcome.checkpoints.iter().map(|(n, _)| n.clone()).collect();
    for (name, params) in &outcome.checkpoints {
        run.write_output(
            &format!("{name}.checkpoint.json"),
            params.to_checkpoint_json().as_bytes(),
        )?;
    }
    run.write_json("config.json", &config)?;
    write_table(run, &outcome.table, &names, &args.ratios, &args.seeds)?;
    let (first, last) = (args.ratios[0], args.ratios[args.ratios.len() - 1]);
    run.write_json(
        "study.json",
        &StudySummary {
            thinking_pairs: outcome.thinking_pairs,
            perception_pairs: outcome.perception_pairs,
            steps: outcome.steps,
            drops: names
                .iter()
                .filter_map(|n| {
                    outcome
                        .table
                        .mean_drop(n, first, last)
                        .map(|d| (n.clone(), d))
                })
                .collect(),
        },
    )
}
