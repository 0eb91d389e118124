//! CSV sequence files: one row per timestep, header `t,<modality>_<dim>...,y`.
//!
//! A modality with a single column whose cells are all integer literals is
//! read as discrete, with alphabet `max + 1`. Anything else is a feature
//! matrix; feature values are always written with a decimal point or an
//! exponent so that files round-trip.

use std::io::{Read, Write};
use std::path::Path;

use crate::distributions::{Modality, ModalityData, SequenceBundle};
use crate::error::{Error, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

fn float_cell(v: f64) -> String {
    // `{:?}` keeps a trailing `.0` on integral values.
    format!("{v:?}")
}

pub fn write_bundle<W: Write>(bundle: &SequenceBundle, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for m in bundle.modalities() {
        let dims = match &m.data {
            ModalityData::Discrete { .. } => 1,
            ModalityData::Continuous { dim, .. } => *dim,
        };
        header.extend((0..dims).map(|d| format!("{}_{d}", m.name)));
    }
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..bundle.len() {
        let mut row = vec![(t + 1).to_string()];
        for m in bundle.modalities() {
            match &m.data {
                ModalityData::Discrete { symbols, .. } => row.push(symbols[t].to_string()),
                ModalityData::Continuous { dim, values } => {
                    row.extend(values[t * dim..(t + 1) * dim].iter().map(|&v| float_cell(v)))
                }
            }
        }
        row.push(bundle.target()[t].to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bundle_file(bundle: &SequenceBundle, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_bundle(bundle, std::io::BufWriter::new(file))
}

/// Splits `name_dim` headers; the modality name may itself contain `_`.
fn split_column(h: &str) -> Result<(&str, usize)> {
    let (name, dim) = h
        .rsplit_once('_')
        .ok_or_else(|| Error::Csv(format!("column {h:?} is not of the form <modality>_<dim>")))?;
    let dim = dim
        .parse()
        .map_err(|_| Error::Csv(format!("column {h:?} has a non-numeric dimension suffix")))?;
    if name.is_empty() {
        return Err(Error::Csv(format!("column {h:?} has an empty modality name")));
    }
    Ok((name, dim))
}

pub fn read_bundle<R: Read>(input: R) -> Result<SequenceBundle> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(|s| s.trim().to_string()).collect();
    if header.len() < 3 || header[0] != "t" || header[header.len() - 1] != "y" {
        return Err(Error::Csv("header must start with `t`, end with `y` and name at least one modality column".into()));
    }
    // (name, first column, width)
    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for (c, h) in header.iter().enumerate().take(header.len() - 1).skip(1) {
        let (name, dim) = split_column(h)?;
        match groups.last_mut() {
            Some(g) if g.0 == name => {
                if dim != g.2 {
                    return Err(Error::Csv(format!("column {h:?} is out of order; expected {}_{}", name, g.2)));
                }
                g.2 += 1;
            }
            _ => {
                if dim != 0 {
                    return Err(Error::Csv(format!("column {h:?}: dimensions must start at 0")));
                }
                if groups.iter().any(|g| g.0 == name) {
                    return Err(Error::Csv(format!("modality {name} columns are not contiguous")));
                }
                groups.push((name.to_string(), c, 1));
            }
        }
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Csv(format!("row {} has {} cells, header has {}", i + 1, rec.len(), header.len())));
        }
        for (c, v) in rec.iter().enumerate() {
            cells[c].push(v.trim().to_string());
        }
    }
    let n = cells[0].len();
    if n == 0 {
        return Err(Error::EmptyData("sequence file has no rows".into()));
    }
    let as_int = |c: usize| -> Option<Vec<u32>> { cells[c].iter().map(|v| v.parse::<u32>().ok()).collect() };
    let mut modalities = Vec::with_capacity(groups.len());
    for (name, first, width) in groups {
        let data = match (width, as_int(first)) {
            (1, Some(symbols)) => ModalityData::Discrete {
                alphabet: symbols.iter().max().map_or(1, |&m| m as usize + 1).max(2),
                symbols,
            },
            _ => {
                let mut values = vec![0.0; n * width];
                for d in 0..width {
                    for (t, v) in cells[first + d].iter().enumerate() {
                        values[t * width + d] = v.parse().map_err(|_| {
                            Error::Csv(format!("row {}: {v:?} in column {} is not a number", t + 1, header[first + d]))
                        })?;
                    }
                }
                ModalityData::Continuous { dim: width, values }
            }
        };
        modalities.push(Modality { name, data });
    }
    let y = as_int(header.len() - 1).ok_or_else(|| Error::Csv("target column y must hold nonnegative integers".into()))?;
    let ny = y.iter().max().map_or(1, |&m| m as usize + 1).max(2);
    SequenceBundle::new(modalities, y, ny)
}

pub fn read_bundle_file(path: &Path) -> Result<SequenceBundle> {
    let file = std::fs::File::open(path)?;
    read_bundle(std::io::BufReader::new(file))
}
