use std::fs;
use std::path::Path;

use serde::Serialize;

use super::interference::InterferenceReport;
use super::involvement::CountDistribution;
use crate::error::{Error, Result};
use crate::model::ParamReport;
use crate::tensor::Tensor;

fn write_rows<T: Serialize>(
    rows: impl IntoIterator<Item = T>,
    path: &Path,
    header: bool,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(header)
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    fs::write(
        path,
        w.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct CountRow<'a> {
    component: &'a str,
    task_count: usize,
    parameters: usize,
    fraction: f64,
}

/// `component,task_count,parameters,fraction`; task count 0 is the inactive bucket.
pub fn write_count_distribution(dists: &[CountDistribution], path: impl AsRef<Path>) -> Result<()> {
    let rows = dists.iter().flat_map(|d| {
        d.parameters.iter().zip(d.fractions()).enumerate().map(
            move |(n, (&parameters, fraction))| CountRow {
                component: &d.component,
                task_count: n,
                parameters,
                fraction,
            },
        )
    });
    write_rows(rows, path.as_ref(), true)
}

#[derive(Serialize)]
struct DeltaRow<'a> {
    regime: &'a str,
    flipped_task: &'a str,
    evaluated_task: &'a str,
    delta: f64,
}

pub fn write_interference(reports: &[InterferenceReport], path: impl AsRef<Path>) -> Result<()> {
    let mut rows = Vec::new();
    for r in reports {
        let regime = match r.regime {
            crate::training::Trainable::All => "all",
            crate::training::Trainable::Unimodal => "unimodal",
            crate::training::Trainable::Multimodal => "multimodal",
        };
        for (f, row) in r.flipped.iter().zip(&r.deltas) {
            for (t, &delta) in r.tasks.iter().zip(row) {
                rows.push(DeltaRow {
                    regime,
                    flipped_task: f,
                    evaluated_task: t,
                    delta,
                });
            }
        }
    }
    write_rows(rows, path.as_ref(), true)
}

#[derive(Serialize)]
struct ParamRow<'a> {
    model: &'a str,
    component: &'a str,
    parameters: usize,
}

pub fn write_param_report(reports: &[(String, ParamReport)], path: impl AsRef<Path>) -> Result<()> {
    let mut rows = Vec::new();
    for (name, r) in reports {
        for (component, parameters) in [
            ("unimodal_encoder", r.unimodal_encoder),
            ("multimodal", r.multimodal),
            ("embeddings", r.embeddings),
            ("heads", r.heads),
            ("total", r.total()),
        ] {
            rows.push(ParamRow {
                model: name,
                component,
                parameters,
            });
        }
    }
    write_rows(rows, path.as_ref(), true)
}

/// A 2-D tensor as comma-separated rows without a header.
pub fn write_grid(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Contract(format!(
            "grid needs a matrix, got {:?}",
            t.shape()
        )));
    }
    write_rows(t.data().chunks(t.shape()[1]), path.as_ref(), false)
}
