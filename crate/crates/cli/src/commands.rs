//! The five command implementations behind the `hgtpp` binary.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hgtpp_core::checkpoint::{self, CheckpointMeta};
use hgtpp_core::data::{self, Dataset, ProcessFamily, SyntheticSpec};
use hgtpp_core::evaluation::{evaluate_stream, EvalConfig, Metrics, PredictionRow, BUCKET_LABELS};
use hgtpp_core::registry::{assemble, AssembledModel, ModelConfig, ModelName};
use hgtpp_core::tensor::Tape;
use hgtpp_core::tpp::EventRecord;
use hgtpp_core::training::{train, NegativeSampler, TrainConfig};

use crate::config::RunConfig;
use crate::CliError;

fn valid_model_names() -> String {
    ModelName::ALL
        .iter()
        .map(|m| m.as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_model(cfg: &RunConfig) -> Result<ModelName, CliError> {
    let raw = cfg
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--model is required; one of: {}", valid_model_names())))?;
    ModelName::parse(raw).map_err(|_| {
        CliError::Usage(format!(
            "unknown model `{raw}`; valid names: {}",
            valid_model_names()
        ))
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let path = cfg
        .data
        .as_deref()
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let mut ds =
        data::load_corpus(path, cfg.bipartite).map_err(|e| CliError::Io(e.to_string()))?;
    if cfg.time_scaling {
        ds = data::scale_times(ds).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(ds)
}

/// Attention encoders need at least two member nodes per event.
fn drop_singletons(ds: Dataset) -> Dataset {
    let (kept, dropped) = data::filter_min_size(ds, 2);
    if dropped > 0 {
        eprintln!("note: dropped {dropped} events with fewer than 2 nodes");
    }
    kept
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Median interevent gap used by duration horizons (1 after scaling).
fn median_gap(ds: &Dataset) -> f64 {
    data::median_interevent_gap(&ds.events).unwrap_or(1.0)
}

fn eval_config(cfg: &RunConfig, ds: &Dataset, with_duration: bool) -> EvalConfig {
    EvalConfig {
        negatives: cfg.negatives,
        seed: cfg.eval_seed,
        horizon_factor: cfg.horizon_factor,
        duration_grid: cfg.duration_grid,
        median_gap: median_gap(ds),
        threads: cfg.threads.max(1),
        with_duration,
    }
}

/// Advance a model through a stream without scoring (history replay).
fn replay(model: &mut AssembledModel, events: &[EventRecord]) -> Result<(), CliError> {
    let mut i = 0;
    while i < events.len() {
        let t = events[i].time;
        let mut j = i;
        while j < events.len() && events[j].time == t {
            j += 1;
        }
        let mut tape = Tape::forward_only();
        model
            .advance_group(&mut tape, &events[i..j])
            .map_err(|e| CliError::Io(e.to_string()))?;
        i = j;
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let name = parse_model(cfg)?;
    let model_config = ModelConfig::for_name(name, cfg.dim, cfg.history);
    if model_config.bipartite != cfg.bipartite {
        return Err(CliError::Usage(format!(
            "model {} is {} but the dataset was declared {}",
            name.as_str(),
            if model_config.bipartite { "bipartite" } else { "homogeneous" },
            if cfg.bipartite { "bipartite" } else { "homogeneous" },
        )));
    }
    let ds = load_dataset(cfg)?;
    let ds = if cfg.bipartite { ds } else { drop_singletons(ds) };
    let split = data::split(&ds).map_err(|e| CliError::Io(e.to_string()))?;

    let mut model = assemble(model_config, ds.num_left.max(2), ds.num_right, cfg.seed)
        .map_err(|e| CliError::Io(e.to_string()))?;

    let train_config = TrainConfig {
        lr: cfg.lr,
        segment_len: cfg.segment,
        negatives: cfg.negatives,
        mc_samples: cfg.mc_samples,
        epochs: cfg.epochs,
        seed: cfg.seed,
        validate_every: cfg.validate_every,
        eval: eval_config(cfg, &ds, true),
    };
    let train_events = &ds.events[split.train.clone()];
    let val_events = &ds.events[split.val.clone()];
    let report = train(&mut model, train_events, val_events, &train_config).map_err(|e| {
        if matches!(e, hgtpp_core::training::TrainError::Diverged { .. }) {
            CliError::Divergence(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    })?;

    let ckpt_path = cfg.out.join("model.ckpt");
    checkpoint::save(&ckpt_path, &CheckpointMeta::for_model(&model), &model.params)
        .map_err(|e| CliError::Io(e.to_string()))?;

    let mut trace = String::from("epoch,train_loss,val_mrr,val_mae\n");
    for row in &report.trace {
        writeln!(
            trace,
            "{},{},{},{}",
            row.epoch,
            row.train_loss,
            fmt_opt(row.val_mrr),
            fmt_opt(row.val_mae)
        )
        .unwrap();
    }
    write_file(&cfg.out.join("loss_trace.csv"), &trace)?;
    write_file(&cfg.out.join("config_resolved.txt"), &cfg.echo())?;

    println!(
        "trained {} on {} events ({} epochs); checkpoint at {}",
        name.as_str(),
        train_events.len(),
        report.trace.len(),
        ckpt_path.display()
    );
    if let Some(best) = report.best_epoch {
        println!("best validation epoch: {best}");
    }
    Ok(())
}

fn restore_for_eval(cfg: &RunConfig) -> Result<(AssembledModel, Dataset), CliError> {
    let ckpt_path = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("model.ckpt"));
    let model = checkpoint::restore_model(&ckpt_path).map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(requested) = &cfg.model {
        checkpoint::check_compatible(
            &CheckpointMeta::for_model(&model),
            requested,
            cfg.dim,
        )
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let ds = load_dataset(cfg)?;
    if model.config.bipartite != ds.bipartite {
        return Err(CliError::Io(format!(
            "checkpoint model {} does not fit a {} dataset",
            model.config.name.as_str(),
            if ds.bipartite { "bipartite" } else { "homogeneous" }
        )));
    }
    let ds = if ds.bipartite { ds } else { drop_singletons(ds) };
    Ok((model, ds))
}

/// Shared evaluate/predict pipeline: replay train+validation history, then
/// stream over the test split.
fn evaluate_pipeline(
    cfg: &RunConfig,
) -> Result<(Metrics, Vec<PredictionRow>, Dataset), CliError> {
    let (mut model, ds) = restore_for_eval(cfg)?;
    let split = data::split(&ds).map_err(|e| CliError::Io(e.to_string()))?;
    model.reset();
    replay(&mut model, &ds.events[..split.test.start])?;
    let sampler = NegativeSampler::fit(
        &ds.events[split.train.clone()],
        model.num_left(),
        model.num_right(),
        model.config.bipartite,
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    let (metrics, rows) = evaluate_stream(
        &mut model,
        &ds.events[split.test.clone()],
        &sampler,
        &eval_config(cfg, &ds, true),
    )
    .map_err(|e| CliError::Io(e.to_string()))?;
    Ok((metrics, rows, ds))
}

fn metrics_csv(metrics: &Metrics, scale: f64) -> String {
    let mut out = String::from("metric,value\n");
    writeln!(out, "events,{}", metrics.count).unwrap();
    writeln!(out, "mrr,{}", metrics.mrr).unwrap();
    writeln!(out, "mae,{}", fmt_opt(metrics.mae)).unwrap();
    writeln!(
        out,
        "mae_original_units,{}",
        fmt_opt(metrics.mae.map(|m| m * scale))
    )
    .unwrap();
    out
}

fn buckets_csv(metrics: &Metrics) -> String {
    let mut out = String::from("bucket,count,mrr,mae\n");
    for (label, bucket) in BUCKET_LABELS.iter().zip(&metrics.buckets) {
        writeln!(
            out,
            "{label},{},{},{}",
            bucket.count,
            if bucket.count > 0 {
                bucket.mrr.to_string()
            } else {
                String::new()
            },
            fmt_opt(bucket.mae)
        )
        .unwrap();
    }
    out
}

fn metrics_table(model: &str, metrics: &Metrics, scale: f64) -> String {
    let mrr = format!("{:.2}", metrics.mrr * 100.0);
    let mae = metrics
        .mae
        .map(|m| format!("{m:.4}"))
        .unwrap_or_else(|| "N/A".into());
    let mae_orig = metrics
        .mae
        .map(|m| format!("{:.4}", m * scale))
        .unwrap_or_else(|| "N/A".into());
    let mut out = String::new();
    writeln!(out, "{:<12} {:>8} {:>12} {:>18}", "Method", "MRR", "MAE", "MAE(original)").unwrap();
    writeln!(out, "{model:<12} {mrr:>8} {mae:>12} {mae_orig:>18}").unwrap();
    out
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let (metrics, _rows, ds) = evaluate_pipeline(cfg)?;
    let model = cfg.model.clone().unwrap_or_else(|| "model".into());
    write_file(
        &cfg.out.join("metrics.csv"),
        &metrics_csv(&metrics, ds.time_scale),
    )?;
    write_file(&cfg.out.join("metrics_buckets.csv"), &buckets_csv(&metrics))?;
    let table = metrics_table(&model, &metrics, ds.time_scale);
    write_file(&cfg.out.join("metrics_table.txt"), &table)?;
    write_file(&cfg.out.join("config_resolved.txt"), &cfg.echo())?;
    print!("{table}");
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let (metrics, rows, _ds) = evaluate_pipeline(cfg)?;
    let mut out =
        String::from("index,time,size,rank,candidates,reciprocal,true_duration,predicted_duration\n");
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.index,
            r.time,
            r.size,
            r.rank,
            r.candidates,
            1.0 / (r.rank as f64 + 1.0),
            r.true_duration,
            fmt_opt(r.predicted_duration)
        )
        .unwrap();
    }
    write_file(&cfg.out.join("predictions.csv"), &out)?;
    write_file(&cfg.out.join("config_resolved.txt"), &cfg.echo())?;
    println!(
        "predicted {} test events (MRR {:.4}); rows at {}",
        metrics.count,
        metrics.mrr,
        cfg.out.join("predictions.csv").display()
    );
    Ok(())
}

/// Parse a simulation spec file (key=value) into a synthetic dataset spec.
fn parse_simulation_spec(path: &Path) -> Result<(SyntheticSpec, u64), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut map = std::collections::BTreeMap::new();
    for (ix, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected key=value, got `{line}`",
                path.display(),
                ix + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| -> Option<&String> { map.get(key) };
    let get_num = |key: &str, default: f64| -> Result<f64, CliError> {
        get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    CliError::Usage(format!("spec key `{key}` has invalid value `{v}`"))
                })
            })
            .unwrap_or(Ok(default))
    };
    let kind = get("kind")
        .cloned()
        .ok_or_else(|| CliError::Usage("simulation spec needs kind=".into()))?;
    let seed = get_num("seed", 0.0)? as u64;
    let horizon = get_num("horizon", 300.0)?;
    let rate = get_num("rate", 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut spec = match kind.as_str() {
        "poisson" | "rayleigh" | "hawkes" => {
            let nodes = get_num("nodes", 10.0)? as usize;
            let edges = get_num("edges", 6.0)? as usize;
            let min_size = get_num("min_size", 2.0)? as usize;
            let max_size = get_num("max_size", 3.0)? as usize;
            if nodes < 2 || min_size < 1 || max_size < min_size {
                return Err(CliError::Usage(
                    "simulation spec needs nodes >= 2 and 1 <= min_size <= max_size".into(),
                ));
            }
            let family = match kind.as_str() {
                "poisson" => ProcessFamily::Poisson { rate },
                "rayleigh" => ProcessFamily::Rayleigh {
                    alpha: get_num("alpha", 1.0)?,
                },
                _ => ProcessFamily::Hawkes {
                    mu: get_num("mu", 1.0)?,
                    alpha: get_num("alpha", 0.5)?,
                    decay: get_num("decay", 1.0)?,
                },
            };
            SyntheticSpec::planted_random(nodes, edges, (min_size, max_size), family, horizon, &mut rng)
        }
        "clique_confusable" => SyntheticSpec::clique_confusable(rate, horizon),
        "bipartite_poisson" => {
            let left = get_num("left_nodes", 6.0)? as usize;
            let right = get_num("right_nodes", 4.0)? as usize;
            let edges = get_num("edges", 6.0)? as usize;
            if left < 2 || right < 1 {
                return Err(CliError::Usage(
                    "bipartite spec needs left_nodes >= 2 and right_nodes >= 1".into(),
                ));
            }
            SyntheticSpec::planted_bipartite_poisson(left, right, edges, rate, horizon, &mut rng)
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown simulation kind `{other}`; expected poisson, rayleigh, hawkes, clique_confusable, or bipartite_poisson"
            )))
        }
    };
    if let Some(name) = get("name") {
        spec.name = name.clone();
    }
    Ok((spec, seed))
}

pub fn cmd_simulate(spec_path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let (spec, spec_seed) = parse_simulation_spec(spec_path)?;
    // the --seed flag, when given, overrides the spec's seed
    let seed = if cfg.seed != 0 { cfg.seed } else { spec_seed };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = data::generate_synthetic(&spec, &mut rng).map_err(|e| CliError::Usage(e.to_string()))?;
    if spec.bipartite {
        let path = cfg.out.join(format!("{}.tsv", spec.name));
        data::save_bipartite_corpus(&ds, &path).map_err(|e| CliError::Io(e.to_string()))?;
        println!("wrote {} events to {}", ds.events.len(), path.display());
    } else {
        let paths = data::save_simplex_corpus(&ds, &cfg.out, &spec.name)
            .map_err(|e| CliError::Io(e.to_string()))?;
        println!(
            "wrote {} events to {} (+ simplices, times)",
            ds.events.len(),
            paths[0].display()
        );
    }
    Ok(())
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (ix, ch) in digits.chars().enumerate() {
        if ix > 0 && (digits.len() - ix) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(&RunConfig {
        time_scaling: false,
        ..cfg.clone()
    })?;
    let st = data::stats(&ds);
    if st.num_events == 0 {
        eprintln!("warning: dataset is empty");
    }
    let dash = "-".to_string();
    println!(
        "{:<16} {:>8} {:>8} {:>10} {:>8} {:>8}",
        "dataset", "|V|", "|V'|", "|E(T)|", "|H|", "|H'|"
    );
    println!(
        "{:<16} {:>8} {:>8} {:>10} {:>8} {:>8}",
        ds.name,
        thousands(st.num_left),
        st.num_right.map(thousands).unwrap_or(dash.clone()),
        thousands(st.num_events),
        thousands(st.distinct_left),
        st.distinct_right.map(thousands).unwrap_or(dash),
    );
    Ok(())
}
