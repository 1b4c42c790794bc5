use std::io::Write;
use std::path::Path;

use siglab::checkpoint::write_checkpoint;
use siglab::checks::run_all;
use siglab::chunked::{sharded_sigmoid_loss, RunStats, ShardPlan, ShardStrategy};
use siglab::gradcheck::Fault;
use siglab::harness::{run, sweep, sweep_csv, LossKind, MaskSetting, RunConfig, SweepAxis, SweepSpec};
use siglab::losses::LossParams;
use siglab::math::{l2_normalize_rows, Matrix};

use crate::config::{render, KvConfig};
use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.txt";

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn run_config(entries: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    for (k, v) in entries {
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn kv_strings(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.to_kv().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

pub fn verify(out_dir: Option<&Path>, bias_grad_offset: f64) -> Result<(), CliError> {
    let results = run_all(Fault { bias_grad_offset });
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:width$}  {}", r.name, r.detail);
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&results).expect("check results serialize");
        write_file(dir, "verify.json", json.as_bytes())?;
    }
    if passed == results.len() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} checks failed", results.len() - passed)))
    }
}

pub fn train(kv: &KvConfig, out_dir: &Path) -> Result<(), CliError> {
    let cfg = run_config(&kv.entries)?;
    let (out, report) = run(&cfg)?;
    let mut trace = Vec::new();
    for m in &out.trace {
        serde_json::to_writer(&mut trace, m).expect("metrics serialize");
        trace.push(b'\n');
    }
    let mut ckpt = Vec::new();
    write_checkpoint(&out.model, &mut ckpt)?;
    let mut eval = serde_json::to_vec_pretty(&report).expect("report serializes");
    eval.push(b'\n');
    write_file(
        out_dir,
        CONFIG_ECHO,
        render("effective train config", &kv_strings(&cfg)).as_bytes(),
    )?;
    write_file(out_dir, "trace.jsonl", &trace)?;
    write_file(out_dir, "eval.json", &eval)?;
    write_file(out_dir, "checkpoint.json", &ckpt)?;
    println!(
        "{} steps, final loss {:.6}, recall@1 {:.4}, zero-shot {:.4}",
        out.trace.len(),
        report.final_loss,
        report.recall_at_1,
        report.zero_shot_accuracy
    );
    Ok(())
}

/// `sweep.*` keys of a sweep config.
#[derive(Debug, Clone, PartialEq)]
struct SweepSettings {
    axis: Option<String>,
    channel: Option<String>,
    values: Option<String>,
    losses: Vec<LossKind>,
    seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            axis: None,
            channel: None,
            values: None,
            losses: vec![LossKind::Sigmoid, LossKind::Softmax],
            seeds: (0..5).collect(),
        }
    }
}

impl SweepSettings {
    fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "sweep.axis" => self.axis = Some(value.to_string()),
            "sweep.channel" => self.channel = Some(value.to_string()),
            "sweep.values" => self.values = Some(value.to_string()),
            "sweep.losses" => {
                self.losses = value
                    .split(',')
                    .map(|v| v.trim().parse::<LossKind>())
                    .collect::<siglab::Result<_>>()?
            }
            "sweep.seeds" => self.seeds = parse_list(key, value)?,
            _ => return Err(CliError::Config(format!("`{key}`: unknown key"))),
        }
        Ok(())
    }

    fn spec(&self) -> Result<SweepSpec, CliError> {
        let required = |v: &Option<String>, key: &str| {
            v.clone()
                .ok_or_else(|| CliError::Config(format!("`{key}`: required for sweep")))
        };
        let axis = required(&self.axis, "sweep.axis")?;
        let values = required(&self.values, "sweep.values")?;
        let key = "sweep.values";
        let axis = match axis.as_str() {
            "batch_size" => SweepAxis::BatchSize(parse_list(key, &values)?),
            "mask" => SweepAxis::Mask(
                values
                    .split(',')
                    .map(|v| v.trim().parse::<MaskSetting>())
                    .collect::<siglab::Result<_>>()?,
            ),
            "corruption" => {
                let channel = required(&self.channel, "sweep.channel")?;
                SweepAxis::Corruption(channel.parse()?, parse_list(key, &values)?)
            }
            "beta2" => SweepAxis::Beta2(parse_list(key, &values)?),
            "bias_init" => SweepAxis::BiasInit(parse_list(key, &values)?),
            other => return Err(CliError::Config(format!("`sweep.axis`: unknown axis `{other}`"))),
        };
        if self.losses.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Config(
                "`sweep.losses` and `sweep.seeds` must be non-empty".into(),
            ));
        }
        Ok(SweepSpec {
            axis,
            losses: self.losses.clone(),
            seeds: self.seeds.clone(),
        })
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("sweep.axis", &self.axis),
            ("sweep.channel", &self.channel),
            ("sweep.values", &self.values),
        ] {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        let losses: Vec<String> = self.losses.iter().map(ToString::to_string).collect();
        let seeds: Vec<String> = self.seeds.iter().map(ToString::to_string).collect();
        out.push(("sweep.losses".into(), losses.join(",")));
        out.push(("sweep.seeds".into(), seeds.join(",")));
        out
    }
}

pub fn sweep_cmd(kv: &KvConfig, out_dir: &Path) -> Result<(), CliError> {
    let mut settings = SweepSettings::default();
    let mut base = Vec::new();
    for (k, v) in &kv.entries {
        if k.starts_with("sweep.") {
            settings.apply(k, v)?;
        } else {
            base.push((k.clone(), v.clone()));
        }
    }
    let spec = settings.spec()?;
    let cfg = run_config(&base)?;
    let rows = sweep(&cfg, &spec)?;
    let mut echo = kv_strings(&cfg);
    echo.extend(settings.to_kv());
    write_file(out_dir, CONFIG_ECHO, render("effective sweep config", &echo).as_bytes())?;
    write_file(out_dir, "results.csv", sweep_csv(&rows).as_bytes())?;
    println!(
        "{} runs written to {}",
        rows.len(),
        out_dir.join("results.csv").display()
    );
    Ok(())
}

/// `bench.*` keys of a chunk-bench config.
#[derive(Debug, Clone, PartialEq)]
struct BenchSettings {
    n: Vec<usize>,
    devices: Vec<usize>,
    dim: usize,
    strategies: Vec<ShardStrategy>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            n: vec![256],
            devices: vec![1, 2, 4, 8],
            dim: 16,
            strategies: vec![ShardStrategy::Chunked, ShardStrategy::Allgather],
        }
    }
}

pub const BENCH_CSV_HEADER: &str = "n,D,b,strategy,peak_entries,floats_transferred,permutes";

pub fn chunk_bench(kv: &KvConfig, out_dir: &Path) -> Result<(), CliError> {
    let mut s = BenchSettings::default();
    for (k, v) in &kv.entries {
        match k.as_str() {
            "bench.n" => s.n = parse_list(k, v)?,
            "bench.devices" => s.devices = parse_list(k, v)?,
            "bench.dim" => s.dim = parse(k, v)?,
            "bench.strategies" => s.strategies = parse_list(k, v)?,
            _ => return Err(CliError::Config(format!("`{k}`: unknown key"))),
        }
    }
    if s.dim == 0 {
        return Err(CliError::Config("`bench.dim`: must be positive".into()));
    }
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for &n in &s.n {
        let x = l2_normalize_rows(&Matrix::from_fn(n, s.dim, |i, k| ((i * s.dim + k) as f64 + 0.5).sin()))?;
        let y = l2_normalize_rows(&Matrix::from_fn(n, s.dim, |i, k| ((i * s.dim + k) as f64 + 0.5).cos()))?;
        for &d in &s.devices {
            let plan = ShardPlan::new(n, d)?;
            for &strategy in &s.strategies {
                let out = sharded_sigmoid_loss(strategy, &plan, &x, &y, &LossParams::default())?;
                let r = RunStats::new(&plan, strategy, &out.stats);
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.n, r.devices, r.b, r.strategy, r.peak_entries, r.floats_transferred, r.permutes
                ));
            }
        }
    }
    let join = |v: Vec<String>| v.join(",");
    let echo = vec![
        (
            "bench.n".to_string(),
            join(s.n.iter().map(ToString::to_string).collect()),
        ),
        (
            "bench.devices".into(),
            join(s.devices.iter().map(ToString::to_string).collect()),
        ),
        ("bench.dim".into(), s.dim.to_string()),
        (
            "bench.strategies".into(),
            join(s.strategies.iter().map(ToString::to_string).collect()),
        ),
    ];
    write_file(
        out_dir,
        CONFIG_ECHO,
        render("effective chunk-bench config", &echo).as_bytes(),
    )?;
    write_file(out_dir, "chunk_bench.csv", csv.as_bytes())?;
    print!("{csv}");
    std::io::stdout()
        .flush()
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(())
}
