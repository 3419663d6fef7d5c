use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::run::{Experiment, ReportRow, RunRecord, SeedSpectrum};
use crate::error::{Error, Result};
use crate::metrics::{opt_field, METRICS_HEADER};
use crate::spectral::{scaled_rate, ChangeRates};

pub const REPORT_HEADER: &str = "method,mode,t,s,seed,dataset_checksum,final_train_loss,\
final_val_loss,precision,recall,dtsd_ltsd,tsd_ltsd,tsd_dtsd,amp_all,amp_ab,amp_dash";

/// One line of a change-rate spectrum. `rank` is 0 for the largest rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub index: usize,
    pub sigma: f64,
    pub signed: f64,
    pub abs: f64,
    pub scaled: f64,
    pub rank: usize,
}

pub fn spectrum_rows(sigma: &[f64], cr: &ChangeRates) -> Result<Vec<SpectrumRow>> {
    if sigma.len() != cr.len() {
        return Err(Error::ShapeMismatch {
            expected: (cr.len(), 1),
            got: (sigma.len(), 1),
        });
    }
    let rank = cr.rank_of();
    (0..cr.len())
        .map(|i| {
            Ok(SpectrumRow {
                index: i,
                sigma: sigma[i],
                signed: cr.signed[i],
                abs: cr.delta[i],
                scaled: scaled_rate(cr.delta[i])?,
                rank: rank[i],
            })
        })
        .collect()
}

/// `index,sigma,signed,abs,scaled,rank`.
pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut out = String::from("index,sigma,signed,abs,scaled,rank\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.index, r.sigma, r.signed, r.abs, r.scaled, r.rank
        );
    }
    out
}

fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::arg(format!("report row: {e}")))?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::arg(format!("report buffer: {e}")))?;
    let mut out = format!("{REPORT_HEADER}\n");
    out.push_str(&String::from_utf8(body).expect("csv output is UTF-8"));
    Ok(out)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let fmt = |e: csv::Error| Error::Format {
        what: "report",
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(fmt)?;
    r.deserialize().map(|row| row.map_err(fmt)).collect()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `report.json` and the `plotdata/` series under
/// `out_dir`.
pub fn write_report(exp: &Experiment, out_dir: &Path) -> Result<()> {
    let plot_dir = out_dir.join("plotdata");
    fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
    let rows = exp.rows();
    write_file(&out_dir.join("report.csv"), &report_csv(&rows)?)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write_file(&out_dir.join("report.json"), &(json + "\n"))?;

    let mut spectrum = String::from("seed,source,index,sigma,signed,abs,scaled,rank\n");
    for s in &exp.spectra {
        for r in spectrum_rows(&s.sigma, &s.rates)? {
            let _ = writeln!(
                spectrum,
                "{},{},{},{},{},{},{},{}",
                s.seed, s.source, r.index, r.sigma, r.signed, r.abs, r.scaled, r.rank
            );
        }
    }
    write_file(&plot_dir.join("spectrum.csv"), &spectrum)?;

    let mut curves = String::from("run,step,loss\n");
    let mut pr = format!("run,{METRICS_HEADER}\n");
    for rec in &exp.records {
        let id = rec.row.run_id();
        for (i, loss) in rec.losses.iter().enumerate() {
            let _ = writeln!(curves, "{id},{},{loss}", i + 1);
        }
        for m in &rec.metrics {
            let _ = writeln!(pr, "{id},{}", m.csv_line());
        }
    }
    write_file(&plot_dir.join("loss_curves.csv"), &curves)?;
    write_file(&plot_dir.join("pr_vs_step.csv"), &pr)?;

    let mut summary = String::from("method,mode,t,s,runs,mean_final_val_loss\n");
    let mut i = 0;
    while i < rows.len() {
        let cell = rows[i].cell();
        let group: Vec<f64> = rows[i..]
            .iter()
            .take_while(|r| r.cell() == cell)
            .map(|r| r.final_val_loss)
            .collect();
        let mean = group.iter().sum::<f64>() / group.len() as f64;
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{mean}",
            cell.method,
            cell.mode.as_deref().unwrap_or(""),
            opt_field(cell.t.map(|v| v as f64)),
            opt_field(cell.s.map(|v| v as f64)),
            group.len()
        );
        i += group.len();
    }
    write_file(&plot_dir.join("summary.csv"), &summary)
}

/// Stores each record as `runs/<run id>.json` and each spectrum as
/// `runs/spectrum-seed<seed>.json`.
pub fn write_runs(exp: &Experiment, runs_dir: &Path) -> Result<()> {
    fs::create_dir_all(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    for rec in &exp.records {
        let json = serde_json::to_string_pretty(rec).expect("record serializes");
        write_file(
            &runs_dir.join(format!("{}.json", rec.row.run_id())),
            &(json + "\n"),
        )?;
    }
    for s in &exp.spectra {
        let json = serde_json::to_string_pretty(s).expect("spectrum serializes");
        write_file(
            &runs_dir.join(format!("spectrum-seed{}.json", s.seed)),
            &(json + "\n"),
        )?;
    }
    Ok(())
}

/// Reassembles an experiment from a directory written by [`write_runs`].
pub fn load_runs(runs_dir: &Path) -> Result<Experiment> {
    let entries = fs::read_dir(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    let mut exp = Experiment::default();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(runs_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let fmt = |e: serde_json::Error| Error::Format {
            what: "run record",
            path: path.clone(),
            message: e.to_string(),
        };
        let is_spectrum = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("spectrum-"));
        if is_spectrum {
            exp.spectra
                .push(serde_json::from_str::<SeedSpectrum>(&text).map_err(fmt)?);
        } else {
            exp.records
                .push(serde_json::from_str::<RunRecord>(&text).map_err(fmt)?);
        }
    }
    exp.sort();
    Ok(exp)
}
