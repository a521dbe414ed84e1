//! Seeded experiment execution and output files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::codec;
use crate::config::{ConfigFile, RunMode};
use crate::data::{make_dataset, Dataset};
use crate::fed::{self, batch_seed, client_local_update, iid_partition, minibatch_schedule, Event, Federation};
use crate::leakage::{invert_update, raw_gradient, AttackConfig, AttackReport, LabelMode};
use crate::ledger::{write_payload, MetricsSink, RoundRecord};
use crate::tensor::Tensor;
use crate::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const ATTACK_REPORT_FILE: &str = "attack_report.json";
pub const PAYLOAD_FILE: &str = "attack_payload.bin";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    mode: RunMode,
    seed: u64,
    build: String,
    started_unix: u64,
    outputs: &'a [PathBuf],
    config: String,
}

#[derive(Debug)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub events: Vec<Event>,
    pub attack: Option<AttackSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackSummary {
    pub raw: AttackReport,
    pub tofu: AttackReport,
    /// Mean nearest-datum MSE of the payload attack over that of the raw attack.
    pub mse_ratio: f64,
}

#[derive(Serialize)]
struct AttackLine<'a> {
    target: &'a str,
    #[serde(flatten)]
    report: &'a AttackReport,
}

pub fn build_id() -> String {
    match option_env!("TOFU_BUILD_ID") {
        Some(id) => format!("{} ({id})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Runs `cfg.mode`, writing the manifest first and every other output under
/// `out_dir`.
pub fn run(cfg: &ConfigFile, out_dir: &Path) -> Result<RunOutput, Error> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut outputs = vec![out_dir.join(METRICS_FILE), out_dir.join(EVENTS_FILE)];
    if cfg.mode == RunMode::Attack {
        outputs.extend(
            [ATTACK_REPORT_FILE, PAYLOAD_FILE, "recon_raw.txt", "recon_tofu.txt"].map(|f| out_dir.join(f)),
        );
    }
    let manifest = Manifest {
        mode: cfg.mode,
        seed: cfg.seed,
        build: build_id(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        outputs: &outputs,
        config: cfg.to_toml(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut w = create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| io_err(&manifest_path)(e.into()))?;
    w.flush().map_err(io_err(&manifest_path))?;

    let data = make_dataset(&cfg.data_spec(), cfg.seed)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut sink = MetricsSink::new(create(&metrics_path)?);

    let mut out = RunOutput {
        out_dir: out_dir.to_path_buf(),
        records: Vec::new(),
        events: Vec::new(),
        attack: None,
    };
    if cfg.mode == RunMode::Attack {
        let summary = run_attack(cfg, &data, out_dir)?;
        for (target, report) in [("raw", &summary.raw), ("tofu", &summary.tofu)] {
            sink.emit(&AttackLine { target, report })?;
        }
        out.attack = Some(summary);
    } else {
        let spec = cfg.mlp_spec(data.input_dim())?;
        let mut federation = Federation::new(cfg.fed_config(), spec, &data)?;
        let result = federation.run(Some(&mut sink));
        out.events = federation.events().to_vec();
        write_events(&out_dir.join(EVENTS_FILE), &out.events)?;
        out.records = result?;
        return Ok(out);
    }
    write_events(&out_dir.join(EVENTS_FILE), &out.events)?;
    Ok(out)
}

fn write_events(path: &Path, events: &[Event]) -> Result<(), Error> {
    let mut sink = MetricsSink::new(create(path)?);
    for e in events {
        sink.emit(e)?;
    }
    Ok(())
}

/// Inverts (a) the gradient of the first `attack_num_recon` datapoints of
/// client 0 and (b) the decoded payload of client 0's first-round update.
fn run_attack(cfg: &ConfigFile, data: &Dataset, out_dir: &Path) -> Result<AttackSummary, Error> {
    let spec = cfg.mlp_spec(data.input_dim())?;
    let theta = spec.init();
    let fcfg = cfg.fed_config();
    let shards = iid_partition(&data.train, &data.labels, fcfg.num_clients, fcfg.seed);
    let (shard_x, shard_y) = data.subset(&shards[0]);
    let n = cfg.attack_num_recon.min(shard_y.len());
    let idx: Vec<usize> = (0..n).collect();
    let victims = shard_x.select_rows(&idx);
    let victim_labels = shard_y[..n].to_vec();

    let mut attack: AttackConfig = cfg.attack_config();
    attack.num_recon = n;
    if let LabelMode::Known(l) = &mut attack.label_mode {
        *l = victim_labels.clone();
    }
    let attack_seed = fed::derive_seed(cfg.seed, fed::STREAM_ATTACK, 0, 0);

    let target = raw_gradient(&theta, &victims, &victim_labels)?;
    let raw = invert_update(&target, &theta, &attack, attack_seed, &victims)?;

    let steps = fcfg.synfreq.steps(shard_y.len(), fcfg.batch_size);
    let batches = minibatch_schedule(shard_y.len(), fcfg.batch_size, steps, batch_seed(fcfg.seed, 0, 1));
    let u_real = client_local_update(&theta, &shard_x, &shard_y, &batches, fcfg.sgd.lr_at_epoch(1))?;
    let enc_seed = fed::derive_seed(cfg.seed, fed::STREAM_ENCODE_UP, 0, 1);
    let (ds, _) = codec::encode(&u_real, &theta, fcfg.nimgs, &fcfg.adam, enc_seed)?;
    let payload_path = out_dir.join(PAYLOAD_FILE);
    write_payload(&ds, create(&payload_path)?)?;
    let observed = codec::decode(&theta, &ds)?;
    let tofu = invert_update(&observed, &theta, &attack, attack_seed, &shard_x)?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = AttackSummary {
        mse_ratio: mean(&tofu.nearest_datum_mse) / mean(&raw.nearest_datum_mse),
        raw,
        tofu,
    };
    let report_path = out_dir.join(ATTACK_REPORT_FILE);
    let mut w = create(&report_path)?;
    serde_json::to_writer_pretty(&mut w, &summary).map_err(|e| io_err(&report_path)(e.into()))?;
    w.flush().map_err(io_err(&report_path))?;
    write_matrix(&out_dir.join("recon_raw.txt"), &summary.raw.recon_inputs)?;
    write_matrix(&out_dir.join("recon_tofu.txt"), &summary.tofu.recon_inputs)?;
    Ok(summary)
}

/// One whitespace-separated row per line.
pub fn write_matrix(path: &Path, m: &Tensor) -> Result<(), Error> {
    let mut w = create(path)?;
    let (rows, _) = m.rows_cols();
    for i in 0..rows {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
