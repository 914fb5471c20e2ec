//! Dataset ingestion: stations file (coordinates + covariates), observation
//! matrix (one row per time, one column per station), covariate
//! standardization, and formula expansion into the model's design columns.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use prodmix::StationSet;

use crate::config::FormulaTerm;

/// Raw station table before formula expansion.
#[derive(Debug, Clone)]
pub struct StationTable {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub covariate_names: Vec<String>,
    /// Standardized (mean 0, unit variance) covariates, sites × covariates.
    pub covariates: DMatrix<f64>,
}

/// A fully ingested dataset: the formula-expanded station set in the same
/// column order the observation matrix uses.
#[derive(Debug, Clone)]
pub struct IngestedData {
    pub stations: StationSet,
    pub station_ids: Vec<String>,
    /// Observations, times × sites; `NaN` marks a missing cell.
    pub raw: DMatrix<f64>,
    pub n_missing: usize,
    /// Formula term labels in design-column order (intercept excluded).
    pub term_labels: Vec<String>,
}

/// Reads `stations.csv` (`id,x,y,<covariate>...`) and standardizes every
/// covariate column to mean 0 and unit variance.
pub fn read_stations(path: &Path) -> Result<StationTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open stations file {}", path.display()))?;
    let header = reader.headers().context("stations file has no header")?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "x" || &header[2] != "y" {
        bail!(
            "stations file {} must start with columns id,x,y (got {:?})",
            path.display(),
            header.iter().take(3).collect::<Vec<_>>()
        );
    }
    let covariate_names: Vec<String> = header.iter().skip(3).map(String::from).collect();

    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based file line, after the header
        let record = record.with_context(|| format!("stations file line {row}"))?;
        if record.len() != header.len() {
            bail!(
                "stations file line {row}: expected {} fields, got {}",
                header.len(),
                record.len()
            );
        }
        let id = record[0].to_string();
        if id.is_empty() {
            bail!("stations file line {row}: empty station id");
        }
        if ids.contains(&id) {
            bail!("stations file line {row}: duplicate station id '{id}'");
        }
        let parse = |col: usize| -> Result<f64> {
            record[col].parse::<f64>().map_err(|_| {
                anyhow!(
                    "stations file line {row}, column '{}': non-numeric value '{}'",
                    &header[col],
                    &record[col]
                )
            })
        };
        let x = parse(1)?;
        let y = parse(2)?;
        if !x.is_finite() || !y.is_finite() {
            bail!("stations file line {row}: coordinates must be finite");
        }
        let mut covs = Vec::with_capacity(covariate_names.len());
        for c in 0..covariate_names.len() {
            let v = parse(c + 3)?;
            if !v.is_finite() {
                bail!(
                    "stations file line {row}, column '{}': covariate must be finite",
                    covariate_names[c]
                );
            }
            covs.push(v);
        }
        ids.push(id);
        coords.push([x, y]);
        cov_rows.push(covs);
    }
    if ids.is_empty() {
        bail!("stations file {} contains no stations", path.display());
    }

    let d = ids.len();
    let p = covariate_names.len();
    let mut covariates = DMatrix::zeros(d, p);
    for (j, name) in covariate_names.iter().enumerate() {
        let col: Vec<f64> = cov_rows.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        if var <= 0.0 {
            bail!(
                "covariate column '{name}' is constant; cannot standardize to unit variance"
            );
        }
        let sd = var.sqrt();
        for i in 0..d {
            covariates[(i, j)] = (col[i] - mean) / sd;
        }
    }

    Ok(StationTable { ids, coords, covariate_names, covariates })
}

impl StationTable {
    /// Expands formula terms over the standardized covariates into the
    /// model's design matrix (squares and interactions are products of the
    /// standardized base columns).
    pub fn design_matrix(&self, terms: &[FormulaTerm]) -> Result<DMatrix<f64>> {
        let col_of = |name: &str| -> Result<usize> {
            self.covariate_names.iter().position(|n| n == name).ok_or_else(|| {
                anyhow!(
                    "formula references covariate '{name}' but the stations file only has {:?}",
                    self.covariate_names
                )
            })
        };
        let d = self.ids.len();
        let mut design = DMatrix::zeros(d, terms.len());
        for (k, term) in terms.iter().enumerate() {
            match term {
                FormulaTerm::Linear(a) => {
                    let ca = col_of(a)?;
                    for i in 0..d {
                        design[(i, k)] = self.covariates[(i, ca)];
                    }
                }
                FormulaTerm::Square(a) => {
                    let ca = col_of(a)?;
                    for i in 0..d {
                        design[(i, k)] = self.covariates[(i, ca)].powi(2);
                    }
                }
                FormulaTerm::Interaction(a, b) => {
                    let (ca, cb) = (col_of(a)?, col_of(b)?);
                    for i in 0..d {
                        design[(i, k)] = self.covariates[(i, ca)] * self.covariates[(i, cb)];
                    }
                }
            }
        }
        Ok(design)
    }

    /// The model-facing station set for a given formula.
    pub fn to_station_set(&self, terms: &[FormulaTerm]) -> Result<StationSet> {
        let design = self.design_matrix(terms)?;
        StationSet::new(self.coords.clone(), design)
            .map_err(|e| anyhow!("station set construction failed: {e}"))
    }
}

/// Reads `observations.csv` (header = station ids, one row per time; empty
/// cell = missing). Column order in the file may differ from the stations
/// file; the returned matrix follows the stations-file order.
pub fn read_observations(
    path: &Path,
    station_ids: &[String],
) -> Result<(DMatrix<f64>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open observations file {}", path.display()))?;
    let header = reader.headers().context("observations file has no header")?.clone();

    // Map file columns onto station order, rejecting unknown and missing ids.
    let mut col_of_site = vec![usize::MAX; station_ids.len()];
    for (c, name) in header.iter().enumerate() {
        match station_ids.iter().position(|id| id == name) {
            Some(j) => {
                if col_of_site[j] != usize::MAX {
                    bail!("observations file lists station id '{name}' twice");
                }
                col_of_site[j] = c;
            }
            None => bail!("observations file column '{name}' is not a known station id"),
        }
    }
    for (j, &c) in col_of_site.iter().enumerate() {
        if c == usize::MAX {
            bail!("observations file has no column for station '{}'", station_ids[j]);
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut n_missing = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.with_context(|| format!("observations file line {row}"))?;
        if record.len() != header.len() {
            bail!(
                "observations file line {row}: expected {} fields, got {}",
                header.len(),
                record.len()
            );
        }
        let mut vals = vec![f64::NAN; station_ids.len()];
        for (j, &c) in col_of_site.iter().enumerate() {
            let cell = &record[c];
            if cell.is_empty() {
                n_missing += 1;
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                anyhow!(
                    "observations file line {row}, column '{}': non-numeric value '{cell}'",
                    &header[c]
                )
            })?;
            if !v.is_finite() {
                bail!(
                    "observations file line {row}, column '{}': value must be finite",
                    &header[c]
                );
            }
            if v < 0.0 {
                bail!(
                    "observations file line {row}, column '{}': negative value {v}",
                    &header[c]
                );
            }
            vals[j] = v;
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        bail!("observations file {} contains no data rows", path.display());
    }
    let raw = DMatrix::from_fn(rows.len(), station_ids.len(), |t, j| rows[t][j]);
    Ok((raw, n_missing))
}

/// Full ingestion pipeline: stations, design expansion, observations.
pub fn ingest(
    stations_csv: &Path,
    observations_csv: &Path,
    terms: &[FormulaTerm],
) -> Result<IngestedData> {
    let table = read_stations(stations_csv)?;
    let stations = table.to_station_set(terms)?;
    let (raw, n_missing) = read_observations(observations_csv, &table.ids)?;
    Ok(IngestedData {
        stations,
        station_ids: table.ids,
        raw,
        n_missing,
        term_labels: terms.iter().map(FormulaTerm::label).collect(),
    })
}

/// Writes an observation matrix in the ingestible layout (header = station
/// ids; `NaN` cells become empty). Values print in shortest round-trip
/// form, so write → read reproduces the matrix bit-exactly.
pub fn write_observations(
    path: &Path,
    station_ids: &[String],
    matrix: &DMatrix<f64>,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record(station_ids)?;
    for t in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| {
                let v = matrix[(t, j)];
                if v.is_nan() {
                    String::new()
                } else {
                    format!("{v}")
                }
            })
            .collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
