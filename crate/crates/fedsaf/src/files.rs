//! On-disk formats: JSON-lines round reports, flat CSV summaries, prototype
//! snapshots, dataset exports and model checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedsaf_core::analysis::RoundReport;
use fedsaf_core::data::LabeledDataset;
use fedsaf_core::fed::{PrototypeSet, Scenario};
use fedsaf_core::model::ClientModel;

use crate::CliError;

pub const CONFIG_ECHO: &str = "config.echo";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Appends one JSON object per round.
pub struct RoundLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RoundLog {
    /// Creates (truncating) the log; a run with zero rounds leaves it empty.
    pub fn create(path: &Path) -> Result<Self, CliError> {
        Ok(Self { path: path.to_owned(), out: create(path)? })
    }

    pub fn append(&mut self, report: &RoundReport) -> Result<(), CliError> {
        serde_json::to_writer(&mut self.out, report)?;
        self.out.write_all(b"\n").map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_round_log(path: &Path) -> Result<Vec<RoundReport>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(CliError::from)).collect()
}

/// One row per round: `scenario, seed, round, threshold_dim,
/// participation_ratio, mean_accuracy`. Rounds without a dimensionality
/// value leave those two cells empty.
pub fn write_summary_csv(path: &Path, rows: &[(Scenario, u64, &RoundReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["scenario", "seed", "round", "threshold_dim", "participation_ratio", "mean_accuracy"])?;
    for (scenario, seed, r) in rows {
        let (dim, pr) = match r.effective_dimensionality {
            Some(e) => (e.threshold_dim.to_string(), e.participation_ratio.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            scenario.name().to_owned(),
            seed.to_string(),
            r.round.to_string(),
            dim,
            pr,
            r.mean_accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// `class, v0 … v{d-1}, weight`, one row per class.
pub fn write_prototypes_csv(path: &Path, set: &PrototypeSet) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let dim = set.dim().unwrap_or(0);
    let mut header = vec!["class".to_owned()];
    header.extend((0..dim).map(|k| format!("v{k}")));
    header.push("weight".to_owned());
    w.write_record(&header)?;
    for (class, entry) in set.iter() {
        let mut row = vec![class.to_string()];
        row.extend(entry.vector.iter().map(f64::to_string));
        row.push(entry.count.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))
}

/// `f0 … f{k-1}, label`, one row per sample.
pub fn write_dataset_csv(path: &Path, data: &LabeledDataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (0..data.input_dim()).map(|k| format!("f{k}")).collect();
    header.push("label".to_owned());
    w.write_record(&header)?;
    for (row, label) in data.features.iter_rows().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset_csv(path: &Path, num_classes: usize) -> Result<LabeledDataset, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    if cols < 2 {
        return Err(CliError::Format { path: path.to_owned(), message: "expected feature columns and a label".into() });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |m: String| CliError::Format { path: path.to_owned(), message: m };
        for field in rec.iter().take(cols - 1) {
            values.push(field.parse::<f64>().map_err(|e| bad(format!("{field:?}: {e}")))?);
        }
        let label = &rec[cols - 1];
        labels.push(label.parse::<usize>().map_err(|e| bad(format!("label {label:?}: {e}")))?);
    }
    let features = fedsaf_core::FeatureMatrix::new(labels.len(), cols - 1, values)?;
    Ok(LabeledDataset::new(features, labels, num_classes)?)
}

pub fn write_checkpoint(path: &Path, model: &ClientModel) -> Result<(), CliError> {
    fs::write(path, model.to_le_bytes()).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<ClientModel, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(ClientModel::from_le_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsaf_core::data::{generate_mixture, MixtureParams};
    use fedsaf_core::model::{build_model, ArchitectureSpec};

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_mixture(&MixtureParams { samples_per_class: 5, ..MixtureParams::default() }).unwrap();
        let path = dir.path().join("train.csv");
        write_dataset_csv(&path, &ds.train).unwrap();
        let header = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_owned();
        assert!(header.starts_with("f0,f1,") && header.ends_with(",f15,label"));
        assert_eq!(read_dataset_csv(&path, 10).unwrap(), ds.train);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&ArchitectureSpec::new(vec![4, 3], 2).unwrap(), 5, 3, 1).unwrap();
        let path = dir.path().join("m.bin");
        write_checkpoint(&path, &m).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), m);
    }

    #[test]
    fn prototype_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = PrototypeSet::new();
        set.insert(0, vec![1.0, -0.5], 3).unwrap();
        set.insert(4, vec![0.25, 2.0], 1).unwrap();
        let path = dir.path().join("p.csv");
        write_prototypes_csv(&path, &set).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "class,v0,v1,weight\n0,1,-0.5,3\n4,0.25,2,1\n");
    }
}
