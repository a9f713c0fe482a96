//! CSV input for the preprocessor.
//!
//! Header: `task_id,label,dense_0,...,dense_{w-1},ids`. Each row carries the
//! task id, the label, exactly `w` dense values, then one or more feature
//! ids starting at the `ids` column (rows are variable length).

use std::io::{Read, Write};

use super::{MetaIoError, MetaSample};

pub fn write_csv<W: Write>(
    samples: &[MetaSample],
    dense_width: usize,
    out: W,
) -> Result<(), MetaIoError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let mut header = vec!["task_id".to_string(), "label".to_string()];
    header.extend((0..dense_width).map(|i| format!("dense_{i}")));
    header.push("ids".to_string());
    w.write_record(&header)?;
    for (index, s) in samples.iter().enumerate() {
        if s.dense_features.len() != dense_width || s.feature_ids.is_empty() {
            return Err(MetaIoError::BadSample {
                index,
                reason: "dense width or id list does not match the header".into(),
            });
        }
        let mut row = vec![s.task_id.to_string(), fmt_f64(s.label)];
        row.extend(s.dense_features.iter().map(|&v| fmt_f64(v)));
        row.extend(s.feature_ids.iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Returns the samples and the dense width declared by the header.
pub fn read_csv<R: Read>(input: R) -> Result<(Vec<MetaSample>, usize), MetaIoError> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(input);
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let bad_header = || MetaIoError::BadSample {
        index: 0,
        reason: format!("unexpected header {names:?}"),
    };
    if names.len() < 3 || names[0] != "task_id" || names[1] != "label" {
        return Err(bad_header());
    }
    if names.last() != Some(&"ids") {
        return Err(bad_header());
    }
    let dense_width = names.len() - 3;
    let mut samples = Vec::new();
    for (index, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| MetaIoError::BadSample { index, reason };
        if rec.len() < dense_width + 3 {
            return Err(bad(format!(
                "{} fields, need at least {}",
                rec.len(),
                dense_width + 3
            )));
        }
        let task_id = rec[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("task_id: {e}")))?;
        let label = rec[1]
            .parse::<f64>()
            .map_err(|e| bad(format!("label: {e}")))?;
        let dense_features = (0..dense_width)
            .map(|k| rec[2 + k].parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("dense: {e}")))?;
        let feature_ids = (2 + dense_width..rec.len())
            .map(|k| rec[k].parse::<u64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("ids: {e}")))?;
        samples.push(MetaSample {
            task_id,
            feature_ids,
            dense_features,
            label,
        });
    }
    Ok((samples, dense_width))
}
