use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kcf::dynamics::io::{read_csv, write_csv, DatasetManifest};
use kcf::dynamics::{builtin, run_experiments, to_augmented, ExperimentPlan, InputMode};
use kcf::edmd::{consistency_index_with, dictionary_matrices, fit_edmd_with};
use kcf::eval::{compare_models, test_cases, trajectories_csv, TestProtocol};
use kcf::learning::{pipeline, state_only, PipelineConfig};
use kcf::model::{
    fit_bilinear_baseline, fit_linear_baseline, AnyModel, LiftedPredictor, SeparableModel,
};
use kcf::observables::descriptor::DictionaryDescriptor;
use kcf::{KcfError, Result};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::provenance::Provenance;

/// Options shared by every subcommand.
pub struct Common {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub tol: f64,
}

impl Common {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn config_bytes(&self) -> Result<Option<Vec<u8>>> {
        self.config.as_ref().map(|p| Ok(fs::read(p)?)).transpose()
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.out_file(name)?;
        fs::write(&path, body)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<PathBuf> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Wall-clock times live outside the metric files.
    fn write_timing(&self, command: &str, start: Instant) -> Result<()> {
        let timing = serde_json::json!({ "command": command, "wall_time_secs": start.elapsed().as_secs_f64() });
        self.write_json("timing.json", &timing)?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", cells.join(",")).expect("string write");
    }
    out
}

/// `example_poly` or a dictionary JSON path.
fn load_dictionary(arg: &str) -> Result<DictionaryDescriptor> {
    if arg == "example_poly" {
        return Ok(DictionaryDescriptor::example_poly());
    }
    DictionaryDescriptor::load(Path::new(arg))
}

fn dictionary_bytes(desc: &DictionaryDescriptor) -> Vec<u8> {
    desc.to_json_string().into_bytes()
}

fn parse_vector(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| KcfError::Config(format!("{what}: not a number: '{v}'")))
        })
        .collect()
}

pub struct SimulateArgs {
    pub system: String,
    pub experiments: usize,
    pub steps: usize,
    pub hold: Option<usize>,
}

pub fn simulate(c: &Common, a: &SimulateArgs) -> Result<()> {
    let start = Instant::now();
    let sys = builtin(&a.system)?;
    let plan = ExperimentPlan {
        num_experiments: a.experiments,
        steps_per_experiment: a.steps,
        seed: c.seed(),
        input_mode: a
            .hold
            .map_or(InputMode::Constant, |h| InputMode::PiecewiseConstant {
                hold_steps: h,
            }),
    };
    let ss = run_experiments(&sys, &plan)?;
    let plan_json = serde_json::to_vec(&(&a.system, &plan))?;
    let prov = Provenance::new(c.seed(), &plan_json);
    write_csv(&ss, &c.out_file("snapshots.csv")?)?;
    let manifest = DatasetManifest {
        n: ss.state_dim(),
        m: ss.input_dim(),
        count: ss.len(),
        seed: c.seed(),
        system_name: sys.name.clone(),
        dt: sys.dt,
        provenance: Some(prov.to_value()),
    };
    let mut value = to_value(&manifest)?;
    value["plan"] = to_value(&plan)?;
    value["stats"] = to_value(&ss.stats)?;
    c.write_json("snapshots.json", &value)?;
    c.write_timing("simulate", start)?;
    println!("{} snapshots of {}", ss.len(), sys.name);
    Ok(())
}

pub fn edmd(c: &Common, data: &Path, dictionary: &str) -> Result<()> {
    let start = Instant::now();
    let desc = load_dictionary(dictionary)?;
    let aug = to_augmented(&read_csv(data)?)?;
    let (a, b) = dictionary_matrices(&desc.build()?, &aug)?;
    let fit = fit_edmd_with(&a, &b, c.tol)?;
    let prov = Provenance::new(c.seed(), &dictionary_bytes(&desc));
    c.write("edmd_matrix.csv", &matrix_csv(&fit.k))?;
    let meta = serde_json::json!({
        "matrix_file": "edmd_matrix.csv",
        "s": fit.k.nrows(),
        "snapshots": aug.len(),
        "rank_flags": to_value(&fit.rank_report)?,
    });
    c.write_json("edmd.json", &prov.stamp(meta))?;
    c.write_timing("edmd", start)?;
    println!("EDMD matrix {}x{}", fit.k.nrows(), fit.k.ncols());
    Ok(())
}

pub fn consistency(c: &Common, data: &Path, dictionary: &str) -> Result<()> {
    let start = Instant::now();
    let desc = load_dictionary(dictionary)?;
    let aug = to_augmented(&read_csv(data)?)?;
    let (a, b) = dictionary_matrices(&desc.build()?, &aug)?;
    let report = consistency_index_with(&a, &b, c.tol)?;
    let prov = Provenance::new(c.seed(), &dictionary_bytes(&desc));
    c.write_json("consistency.json", &prov.stamp(to_value(&report)?))?;
    c.write_timing("consistency", start)?;
    println!(
        "index {:e}, proximity {:e}",
        report.index, report.sqrt_index
    );
    Ok(())
}

pub fn learn(c: &Common, data: &Path) -> Result<()> {
    let start = Instant::now();
    let mut config = match c.config_bytes()? {
        Some(bytes) => serde_json::from_slice::<PipelineConfig>(&bytes)?,
        None => PipelineConfig::dc_motor(c.seed()),
    };
    if let Some(seed) = c.seed {
        config.train.seed = seed;
    }
    // hash the effective configuration, after the seed override
    let bytes = serde_json::to_vec(&config)?;
    let ss = read_csv(data)?;
    let out = pipeline(&config, &ss, None)?;
    let prov = Provenance::new(config.train.seed, &bytes);

    let desc = out
        .separable
        .descriptor
        .clone()
        .ok_or_else(|| KcfError::Config("learned model has no dictionary".into()))?;
    c.write_json("dictionary.json", &prov.stamp(to_value(&desc)?))?;
    let models = [
        ("separable", AnyModel::Separable(out.separable)),
        ("linear", AnyModel::Linear(out.linear)),
        ("bilinear", AnyModel::Bilinear(out.bilinear)),
    ];
    for (name, model) in &models {
        c.write_json(
            &format!("model_{name}.json"),
            &prov.stamp(to_value(&model.to_file()?)?),
        )?;
    }
    c.write_json("consistency.json", &prov.stamp(to_value(&out.consistency)?))?;
    let mut reports = Vec::new();
    for mut report in out
        .dictionary_report
        .into_iter()
        .chain(out.baseline_reports)
    {
        report.wall_time_secs = None;
        reports.push(report);
    }
    if let Some(main) = reports.first() {
        c.write("training_epochs.csv", &main.epochs_csv())?;
    }
    let value = serde_json::json!({
        "config": to_value(&config)?,
        "reports": to_value(&reports)?,
        "epochs_file": "training_epochs.csv",
    });
    c.write_json("training.json", &prov.stamp(value))?;
    c.write_timing("learn", start)?;
    println!("proximity {:e}", out.consistency.sqrt_index);
    Ok(())
}

pub fn extract(c: &Common, data: &Path, dictionary: &str, kind: &str) -> Result<()> {
    let start = Instant::now();
    let desc = load_dictionary(dictionary)?;
    let ss = read_csv(data)?;
    let model = match kind {
        "separable" => {
            let (model, report) = SeparableModel::identify(&desc, &to_augmented(&ss)?)?;
            println!("proximity {:e}", report.sqrt_index);
            AnyModel::Separable(model)
        }
        "linear" => AnyModel::Linear(fit_linear_baseline(&state_only(&desc)?, &ss)?),
        "bilinear" => AnyModel::Bilinear(fit_bilinear_baseline(&state_only(&desc)?, &ss, false)?),
        other => {
            return Err(KcfError::Config(format!(
                "unknown model kind '{other}'; expected separable, linear or bilinear"
            )))
        }
    };
    let prov = Provenance::new(c.seed(), &dictionary_bytes(&desc));
    c.write_json(
        &format!("model_{kind}.json"),
        &prov.stamp(to_value(&model.to_file()?)?),
    )?;
    c.write_timing("extract", start)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(AnyModel, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let model = AnyModel::from_json_str(
        std::str::from_utf8(&bytes).map_err(|e| KcfError::Io(e.to_string()))?,
    )?;
    Ok((model, bytes))
}

/// Input rows from a CSV with header `u1..um`.
fn read_inputs(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_vector(line, "input row").map_err(|e| KcfError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(KcfError::Config(format!(
            "{} has no input rows",
            path.display()
        )));
    }
    Ok(rows)
}

pub fn predict(c: &Common, model_path: &Path, inputs_path: &Path, x0: &str) -> Result<()> {
    let start = Instant::now();
    let (model, bytes) = load_model(model_path)?;
    let inputs = read_inputs(inputs_path)?;
    let x0 = parse_vector(x0, "x0")?;
    let rollout = model.predictor().rollout(&x0, &inputs)?;
    let (n, m) = (x0.len(), inputs[0].len());
    let mut header = vec!["step".to_string()];
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("x{i}")));
    let mut out = header.join(",") + "\n";
    for (k, state) in rollout.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        match inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| format!("{v:e}"))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        row.extend(state.iter().map(|v| format!("{v:e}")));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    c.write("prediction.csv", &out)?;
    let prov = Provenance::new(c.seed(), &bytes);
    let meta = serde_json::json!({ "prediction_file": "prediction.csv", "model": model.predictor().kind(), "steps": inputs.len() });
    c.write_json("prediction.json", &prov.stamp(meta))?;
    c.write_timing("predict", start)?;
    Ok(())
}

pub struct CompareArgs {
    pub system: String,
    pub models: Vec<PathBuf>,
    pub names: Vec<String>,
    pub steps: usize,
    pub x0: Vec<String>,
}

pub fn compare(c: &Common, a: &CompareArgs) -> Result<()> {
    let start = Instant::now();
    if a.models.len() < 2 {
        return Err(KcfError::Config(
            "compare needs at least two model files".into(),
        ));
    }
    let sys = builtin(&a.system)?;
    let protocol = match c.config_bytes()? {
        Some(bytes) => serde_json::from_slice::<TestProtocol>(&bytes)?,
        None => {
            let starts = if !a.x0.is_empty() {
                a.x0.iter()
                    .map(|s| parse_vector(s, "x0"))
                    .collect::<Result<_>>()?
            } else if sys.name.starts_with("dc_motor") {
                TestProtocol::dc_motor(0).initial_states
            } else {
                Vec::new()
            };
            TestProtocol {
                steps: a.steps,
                ..TestProtocol::new(c.seed(), starts)
            }
        }
    };
    let mut loaded = Vec::new();
    let mut hash_input = serde_json::to_vec(&protocol)?;
    for path in &a.models {
        let (model, bytes) = load_model(path)?;
        hash_input.extend_from_slice(&bytes);
        loaded.push(model);
    }
    let names: Vec<String> = (0..loaded.len())
        .map(|i| {
            a.names.get(i).cloned().unwrap_or_else(|| {
                a.models[i]
                    .file_stem()
                    .map_or(format!("model{i}"), |s| s.to_string_lossy().into_owned())
            })
        })
        .collect();
    let cases = test_cases(&sys, &protocol)?;
    let models: Vec<(&str, &dyn LiftedPredictor)> = names
        .iter()
        .zip(&loaded)
        .map(|(n, m)| (n.as_str(), m.predictor()))
        .collect();
    let (cmp, preds) = compare_models(&cases, &models);
    let prov = Provenance::new(protocol.seed, &hash_input);

    c.write("comparison.csv", &cmp.table_csv())?;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    c.write(
        "trajectories.csv",
        &trajectories_csv(&cases, &name_refs, &preds),
    )?;
    let value = serde_json::json!({
        "system": sys.name,
        "protocol": to_value(&protocol)?,
        "comparison": to_value(&cmp)?,
        "table_file": "comparison.csv",
        "trajectories_file": "trajectories.csv",
    });
    c.write_json("comparison.json", &prov.stamp(value))?;
    c.write_timing("compare", start)?;
    for s in &cmp.scores {
        match &s.rmse {
            Some(r) => println!("{}: rmse {:?}", s.name, r),
            None => println!(
                "{}: failed ({})",
                s.name,
                s.failure.as_deref().unwrap_or("unknown")
            ),
        }
    }
    Ok(())
}
