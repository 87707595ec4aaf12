//! Dataset dump/load. One header row, then one row per region; reals are
//! written with 17 significant digits so that reading back is lossless.

use std::io::{BufRead, Write};

use super::{BBox, RegionSample};
use crate::error::{Error, Result};

const NA: &str = "NA";

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(dim: usize) -> String {
    let mut cols: Vec<String> = (0..dim).map(|i| format!("feature_{i}")).collect();
    cols.push("y".into());
    cols.extend(["proposal_x1", "proposal_y1", "proposal_x2", "proposal_y2"].map(String::from));
    cols.extend(["gt_x1", "gt_y1", "gt_x2", "gt_y2"].map(String::from));
    cols.extend((0..4).map(|i| format!("delta_{i}")));
    cols.join(",")
}

pub fn write_dataset_csv<W: Write>(mut out: W, samples: &[RegionSample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.feature.len());
    writeln!(out, "{}", header(dim))?;
    for s in samples {
        let mut cols: Vec<String> = s.feature.iter().map(|&v| real(v)).collect();
        cols.push(s.label.to_string());
        cols.extend(s.proposal.coords().map(real));
        match s.gt {
            Some(g) => cols.extend(g.coords().map(real)),
            None => cols.extend([NA; 4].map(String::from)),
        }
        match s.target_deltas {
            Some(d) => cols.extend(d.map(real)),
            None => cols.extend([NA; 4].map(String::from)),
        }
        writeln!(out, "{}", cols.join(","))?;
    }
    Ok(())
}

fn parse_real(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::DatasetFormat(format!("line {line}: bad number `{s}`")))
}

fn parse_quad(cols: &[&str], line: usize) -> Result<Option<[f64; 4]>> {
    if cols.iter().all(|c| c.trim() == NA) {
        return Ok(None);
    }
    let mut q = [0.0; 4];
    for (slot, c) in q.iter_mut().zip(cols) {
        *slot = parse_real(c, line)?;
    }
    Ok(Some(q))
}

pub fn read_dataset_csv<R: BufRead>(input: R) -> Result<Vec<RegionSample>> {
    let mut lines = input.lines();
    let head = lines
        .next()
        .ok_or_else(|| Error::DatasetFormat("missing header".into()))??;
    let width = head.split(',').count();
    let dim = width
        .checked_sub(13)
        .filter(|&d| head == header(d))
        .ok_or_else(|| Error::DatasetFormat("unexpected header".into()))?;

    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != width {
            return Err(Error::DatasetFormat(format!(
                "line {lineno}: expected {width} columns, found {}",
                cols.len()
            )));
        }
        let feature = cols[..dim]
            .iter()
            .map(|c| parse_real(c, lineno))
            .collect::<Result<Vec<_>>>()?;
        let label = cols[dim]
            .trim()
            .parse()
            .map_err(|_| Error::DatasetFormat(format!("line {lineno}: bad label")))?;
        let p = parse_quad(&cols[dim + 1..dim + 5], lineno)?
            .ok_or_else(|| Error::DatasetFormat(format!("line {lineno}: missing proposal")))?;
        let gt = parse_quad(&cols[dim + 5..dim + 9], lineno)?
            .map(|g| BBox::new(g[0], g[1], g[2], g[3]))
            .transpose()?;
        let target_deltas = parse_quad(&cols[dim + 9..dim + 13], lineno)?;
        if (label > 0) != gt.is_some() || gt.is_some() != target_deltas.is_some() {
            return Err(Error::DatasetFormat(format!(
                "line {lineno}: ground truth must be present iff y > 0"
            )));
        }
        out.push(RegionSample {
            feature,
            label,
            proposal: BBox::new(p[0], p[1], p[2], p[3])?,
            gt,
            target_deltas,
        });
    }
    Ok(out)
}
