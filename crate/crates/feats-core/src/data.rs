//! Panel datasets and their file formats.
//!
//! Two on-disk formats are supported: a long-form CSV triple (X, optional
//! Z, y) and the UEA/UCR `.ts` classification format (equal-length,
//! no-missing-value files only). Loaders reject rather than impute: any
//! malformed input produces a diagnostic with its location.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Continuous(Vec<f64>),
    /// 0/1 labels stored as floats.
    Binary(Vec<f64>),
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
        names: Vec<String>,
    },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Continuous(v) | Targets::Binary(v) => v.len(),
            Targets::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Continuous(v) => Targets::Continuous(idx.iter().map(|&i| v[i]).collect()),
            Targets::Binary(v) => Targets::Binary(idx.iter().map(|&i| v[i]).collect()),
            Targets::Classes {
                labels,
                n_classes,
                names,
            } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
                names: names.clone(),
            },
        }
    }
}

/// n samples of m series over `steps` time points, optional static
/// covariates, targets, and positive sample weights.
#[derive(Clone, Debug)]
pub struct PanelDataset {
    pub m: usize,
    pub steps: usize,
    pub p: usize,
    /// n * m * steps, sample-major then series-major.
    pub x: Vec<f64>,
    /// n * p.
    pub z: Vec<f64>,
    pub targets: Targets,
    pub weights: Vec<f64>,
}

impl PanelDataset {
    pub fn new(m: usize, steps: usize, p: usize, x: Vec<f64>, z: Vec<f64>, targets: Targets) -> Result<Self> {
        let n = targets.len();
        let weights = vec![1.0; n];
        let ds = PanelDataset {
            m,
            steps,
            p,
            x,
            z,
            targets,
            weights,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.x.len() != n * self.m * self.steps {
            return Err(Error::Data(format!(
                "panel buffer holds {} values, expected {} ({} samples x {} series x {} times)",
                self.x.len(),
                n * self.m * self.steps,
                n,
                self.m,
                self.steps
            )));
        }
        if self.z.len() != n * self.p {
            return Err(Error::Data(format!(
                "static buffer holds {} values, expected {}",
                self.z.len(),
                n * self.p
            )));
        }
        if self.weights.len() != n {
            return Err(Error::Data("weights length does not match sample count".into()));
        }
        if self.x.iter().chain(&self.z).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in predictors".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Data("sample weights must be positive".into()));
        }
        match &self.targets {
            Targets::Continuous(v) | Targets::Binary(v) => {
                if v.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Data("non-finite target".into()));
                }
                if let Targets::Binary(v) = &self.targets {
                    if v.iter().any(|&t| t != 0.0 && t != 1.0) {
                        return Err(Error::Data("binary targets must be 0 or 1".into()));
                    }
                }
            }
            Targets::Classes { labels, n_classes, .. } => {
                if *n_classes < 2 {
                    return Err(Error::Data("classification needs at least 2 classes".into()));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::Data(format!(
                        "class index {bad} out of range [0, {n_classes})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Gather selected samples into a B x (m*steps) matrix.
    pub fn x_rows(&self, idx: &[usize]) -> Tensor {
        let row = self.m * self.steps;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.x[i * row..(i + 1) * row]);
        }
        Tensor::matrix(idx.len(), row, data).unwrap()
    }

    pub fn z_rows(&self, idx: &[usize]) -> Option<Tensor> {
        if self.p == 0 {
            return None;
        }
        let mut data = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            data.extend_from_slice(&self.z[i * self.p..(i + 1) * self.p]);
        }
        Some(Tensor::matrix(idx.len(), self.p, data).unwrap())
    }

    pub fn weights_rows(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.weights[i]).collect()
    }

    /// View of one sample as an m x steps row block.
    pub fn sample(&self, i: usize) -> &[f64] {
        let row = self.m * self.steps;
        &self.x[i * row..(i + 1) * row]
    }

    /// Interpret loaded continuous targets as a task-specific kind.
    pub fn cast_targets(&mut self, kind: TargetKind) -> Result<()> {
        let values = match &self.targets {
            Targets::Continuous(v) => v.clone(),
            _ => return Ok(()),
        };
        match kind {
            TargetKind::Continuous => {}
            TargetKind::Binary => {
                if values.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Data("binary task requires 0/1 targets".into()));
                }
                self.targets = Targets::Binary(values);
            }
            TargetKind::MultiClass => {
                let mut labels = Vec::with_capacity(values.len());
                for &v in &values {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(Error::Data(format!(
                            "multiclass task requires non-negative integer targets, got {v}"
                        )));
                    }
                    labels.push(v as usize);
                }
                let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
                let names = (0..n_classes).map(|c| c.to_string()).collect();
                self.targets = Targets::Classes {
                    labels,
                    n_classes,
                    names,
                };
                self.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Continuous,
    Binary,
    MultiClass,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_number(field: &str, path: &Path, line_no: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::Data(format!(
            "{}:{}: non-numeric value '{}'",
            path.display(),
            line_no,
            field.trim()
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!(
            "{}:{}: non-finite value '{}'",
            path.display(),
            line_no,
            field.trim()
        )));
    }
    Ok(v)
}

fn parse_index(field: &str, path: &Path, line_no: usize) -> Result<usize> {
    field.trim().parse().map_err(|_| {
        Error::Data(format!(
            "{}:{}: invalid index '{}'",
            path.display(),
            line_no,
            field.trim()
        ))
    })
}

/// Load the long-form panel CSVs.
///
/// X columns are exactly `sample_id,series_id,time,value` over a dense
/// grid with ids contiguous from 0; Z is `sample_id,covariate_id,value`;
/// y is `sample_id,target[,weight]`.
pub fn load_panel_csv(x_path: &Path, z_path: Option<&Path>, y_path: &Path) -> Result<PanelDataset> {
    // targets first: they define the sample count
    let y_lines = read_lines(y_path)?;
    if y_lines.is_empty() {
        return Err(Error::Data(format!("{}: empty file", y_path.display())));
    }
    let header = y_lines[0].trim();
    let with_weight = match header {
        "sample_id,target" => false,
        "sample_id,target,weight" => true,
        other => {
            return Err(Error::Data(format!(
                "{}: expected header 'sample_id,target[,weight]', got '{other}'",
                y_path.display()
            )))
        }
    };
    let mut y_map: HashMap<usize, (f64, f64)> = HashMap::new();
    for (ln, line) in y_lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if with_weight { 3 } else { 2 };
        if fields.len() != expected {
            return Err(Error::Data(format!(
                "{}:{}: expected {} fields, got {}",
                y_path.display(),
                ln + 1,
                expected,
                fields.len()
            )));
        }
        let sid = parse_index(fields[0], y_path, ln + 1)?;
        let target = parse_number(fields[1], y_path, ln + 1)?;
        let weight = if with_weight {
            parse_number(fields[2], y_path, ln + 1)?
        } else {
            1.0
        };
        if y_map.insert(sid, (target, weight)).is_some() {
            return Err(Error::Data(format!(
                "{}:{}: duplicate sample_id {sid}",
                y_path.display(),
                ln + 1
            )));
        }
    }
    let n = y_map.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: no samples", y_path.display())));
    }
    for sid in 0..n {
        if !y_map.contains_key(&sid) {
            return Err(Error::Data(format!(
                "{}: sample ids must be contiguous from 0; missing {sid}",
                y_path.display()
            )));
        }
    }

    // X panel
    let x_lines = read_lines(x_path)?;
    if x_lines.is_empty() || x_lines[0].trim() != "sample_id,series_id,time,value" {
        return Err(Error::Data(format!(
            "{}: expected header 'sample_id,series_id,time,value'",
            x_path.display()
        )));
    }
    let mut cells: HashMap<(usize, usize, usize), f64> = HashMap::new();
    let (mut max_series, mut max_time) = (0usize, 0usize);
    for (ln, line) in x_lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "{}:{}: expected 4 fields, got {}",
                x_path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let sid = parse_index(fields[0], x_path, ln + 1)?;
        let series = parse_index(fields[1], x_path, ln + 1)?;
        let time = parse_index(fields[2], x_path, ln + 1)?;
        let value = parse_number(fields[3], x_path, ln + 1)?;
        if sid >= n {
            return Err(Error::Data(format!(
                "{}:{}: sample_id {sid} has no target",
                x_path.display(),
                ln + 1
            )));
        }
        max_series = max_series.max(series);
        max_time = max_time.max(time);
        if cells.insert((sid, series, time), value).is_some() {
            return Err(Error::Data(format!(
                "{}:{}: duplicate (sample {sid}, series {series}, time {time})",
                x_path.display(),
                ln + 1
            )));
        }
    }
    let (m, steps) = (max_series + 1, max_time + 1);
    let mut x = vec![0.0; n * m * steps];
    for sid in 0..n {
        for series in 0..m {
            for time in 0..steps {
                match cells.get(&(sid, series, time)) {
                    Some(&v) => x[sid * m * steps + series * steps + time] = v,
                    None => {
                        return Err(Error::Data(format!(
                            "{}: missing cell (sample {sid}, series {series}, time {time})",
                            x_path.display()
                        )))
                    }
                }
            }
        }
    }

    // optional statics
    let (p, z) = match z_path {
        None => (0, Vec::new()),
        Some(zp) => {
            let z_lines = read_lines(zp)?;
            if z_lines.is_empty() || z_lines[0].trim() != "sample_id,covariate_id,value" {
                return Err(Error::Data(format!(
                    "{}: expected header 'sample_id,covariate_id,value'",
                    zp.display()
                )));
            }
            let mut entries: HashMap<(usize, usize), f64> = HashMap::new();
            let mut max_cov = 0usize;
            for (ln, line) in z_lines.iter().enumerate().skip(1) {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 3 {
                    return Err(Error::Data(format!(
                        "{}:{}: expected 3 fields, got {}",
                        zp.display(),
                        ln + 1,
                        fields.len()
                    )));
                }
                let sid = parse_index(fields[0], zp, ln + 1)?;
                let cov = parse_index(fields[1], zp, ln + 1)?;
                let value = parse_number(fields[2], zp, ln + 1)?;
                max_cov = max_cov.max(cov);
                if entries.insert((sid, cov), value).is_some() {
                    return Err(Error::Data(format!(
                        "{}:{}: duplicate (sample {sid}, covariate {cov})",
                        zp.display(),
                        ln + 1
                    )));
                }
            }
            let p = max_cov + 1;
            let mut z = vec![0.0; n * p];
            for sid in 0..n {
                for cov in 0..p {
                    match entries.get(&(sid, cov)) {
                        Some(&v) => z[sid * p + cov] = v,
                        None => {
                            return Err(Error::Data(format!(
                                "{}: missing (sample {sid}, covariate {cov})",
                                zp.display()
                            )))
                        }
                    }
                }
            }
            (p, z)
        }
    };

    let mut targets = vec![0.0; n];
    let mut weights = vec![1.0; n];
    for (sid, (t, w)) in y_map {
        targets[sid] = t;
        weights[sid] = w;
    }
    let mut ds = PanelDataset::new(m, steps, p, x, z, Targets::Continuous(targets))?;
    ds.weights = weights;
    ds.validate()?;
    Ok(ds)
}

/// Load a UEA/UCR `.ts` classification file.
///
/// Only equal-length multivariate sets without missing values are in
/// scope. Class labels map to indices in the declaration order of the
/// `@classLabel` header.
pub fn load_uea_ts(path: &Path) -> Result<PanelDataset> {
    let lines = read_lines(path)?;
    let mut class_names: Vec<String> = Vec::new();
    let mut equal_length = true;
    let mut in_data = false;
    let mut dims_declared: Option<usize> = None;

    let mut samples: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();

    for (ln, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let lower = line.to_ascii_lowercase();
            if lower.starts_with("@data") {
                in_data = true;
                continue;
            }
            if lower.starts_with("@classlabel") {
                let mut parts = line.split_whitespace();
                parts.next();
                let flag = parts.next().unwrap_or("false");
                if !flag.eq_ignore_ascii_case("true") {
                    return Err(Error::Data(format!(
                        "{}:{}: only classification .ts files are supported",
                        path.display(),
                        ln + 1
                    )));
                }
                class_names = parts.map(|s| s.to_string()).collect();
                continue;
            }
            if lower.starts_with("@equallength") {
                equal_length = line
                    .split_whitespace()
                    .nth(1)
                    .map_or(true, |v| v.eq_ignore_ascii_case("true"));
                continue;
            }
            if lower.starts_with("@dimension") {
                if let Some(v) = line.split_whitespace().nth(1) {
                    dims_declared = v.parse().ok();
                }
                continue;
            }
            if lower.starts_with("@univariate") {
                let uni = line
                    .split_whitespace()
                    .nth(1)
                    .map_or(false, |v| v.eq_ignore_ascii_case("true"));
                if uni {
                    dims_declared = Some(1);
                }
                continue;
            }
            // other headers (@problemName, @timeStamps, @seriesLength, ...) are informational
            continue;
        }

        if !equal_length {
            return Err(Error::Data(format!(
                "{}: variable-length series are not supported",
                path.display()
            )));
        }
        let mut sections: Vec<&str> = line.split(':').collect();
        if sections.len() < 2 {
            return Err(Error::Data(format!(
                "{}:{}: expected ':'-separated dimensions and class label",
                path.display(),
                ln + 1
            )));
        }
        let label_txt = sections.pop().unwrap().trim();
        let label = class_names
            .iter()
            .position(|c| c == label_txt)
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: unknown class label '{label_txt}'",
                    path.display(),
                    ln + 1
                ))
            })?;
        let mut dims: Vec<Vec<f64>> = Vec::with_capacity(sections.len());
        for sec in sections {
            let mut series = Vec::new();
            for field in sec.split(',') {
                let t = field.trim();
                if t == "?" || t.eq_ignore_ascii_case("nan") {
                    return Err(Error::Data(format!(
                        "{}:{}: missing values are not supported",
                        path.display(),
                        ln + 1
                    )));
                }
                series.push(parse_number(t, path, ln + 1)?);
            }
            dims.push(series);
        }
        samples.push(dims);
        labels.push(label);
    }

    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let m = samples[0].len();
    let steps = samples[0][0].len();
    if let Some(d) = dims_declared {
        if d != m {
            return Err(Error::Data(format!(
                "{}: header declares {d} dimensions but rows have {m}",
                path.display()
            )));
        }
    }
    let mut x = Vec::with_capacity(samples.len() * m * steps);
    for (i, dims) in samples.iter().enumerate() {
        if dims.len() != m {
            return Err(Error::Data(format!(
                "{}: sample {i} has {} dimensions, expected {m}",
                path.display(),
                dims.len()
            )));
        }
        for series in dims {
            if series.len() != steps {
                return Err(Error::Data(format!(
                    "{}: unequal series lengths ({} vs {steps}) are not supported",
                    path.display(),
                    series.len()
                )));
            }
            x.extend_from_slice(series);
        }
    }
    let n_classes = class_names.len();
    PanelDataset::new(
        m,
        steps,
        0,
        x,
        Vec::new(),
        Targets::Classes {
            labels,
            n_classes,
            names: class_names,
        },
    )
}

/// Atomic text write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(content.as_bytes())
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Shortest round-trip decimal representation, matching serde_json.
pub fn fmt_float(v: f64) -> String {
    let mut buf = serde_json::to_string(&v).unwrap_or_else(|_| v.to_string());
    if buf.starts_with('"') {
        buf = buf.trim_matches('"').to_string();
    }
    buf
}

/// Write the X/Z/y CSV triple for a dataset; returns written paths.
pub fn write_panel_csv(ds: &PanelDataset, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    let n = ds.n();

    let mut x_out = String::from("sample_id,series_id,time,value\n");
    for i in 0..n {
        for j in 0..ds.m {
            for t in 0..ds.steps {
                let v = ds.x[i * ds.m * ds.steps + j * ds.steps + t];
                x_out.push_str(&format!("{i},{j},{t},{}\n", fmt_float(v)));
            }
        }
    }
    let x_path = dir.join(format!("X_{prefix}.csv"));
    write_atomic(&x_path, &x_out)?;
    written.push(x_path);

    if ds.p > 0 {
        let mut z_out = String::from("sample_id,covariate_id,value\n");
        for i in 0..n {
            for c in 0..ds.p {
                z_out.push_str(&format!("{i},{c},{}\n", fmt_float(ds.z[i * ds.p + c])));
            }
        }
        let z_path = dir.join(format!("Z_{prefix}.csv"));
        write_atomic(&z_path, &z_out)?;
        written.push(z_path);
    }

    let weighted = ds.weights.iter().any(|&w| w != 1.0);
    let mut y_out = String::from(if weighted {
        "sample_id,target,weight\n"
    } else {
        "sample_id,target\n"
    });
    for i in 0..n {
        let t = match &ds.targets {
            Targets::Continuous(v) | Targets::Binary(v) => fmt_float(v[i]),
            Targets::Classes { labels, .. } => labels[i].to_string(),
        };
        if weighted {
            y_out.push_str(&format!("{i},{t},{}\n", fmt_float(ds.weights[i])));
        } else {
            y_out.push_str(&format!("{i},{t}\n"));
        }
    }
    let y_path = dir.join(format!("y_{prefix}.csv"));
    write_atomic(&y_path, &y_out)?;
    written.push(y_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn load_small_panel() {
        let dir = tempfile::tempdir().unwrap();
        let x = write_tmp(
            dir.path(),
            "X.csv",
            "sample_id,series_id,time,value\n0,0,0,1.0\n0,0,1,2.0\n0,0,2,3.0\n1,0,0,4.0\n1,0,1,5.0\n1,0,2,6.0\n",
        );
        let y = write_tmp(dir.path(), "y.csv", "sample_id,target\n0,1.5\n1,-0.5\n");
        let ds = load_panel_csv(&x, None, &y).unwrap();
        assert_eq!((ds.n(), ds.m, ds.steps), (2, 1, 3));
        assert_eq!(ds.x, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn duplicate_cell_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let x = write_tmp(
            dir.path(),
            "X.csv",
            "sample_id,series_id,time,value\n0,0,0,1.0\n0,0,0,2.0\n",
        );
        let y = write_tmp(dir.path(), "y.csv", "sample_id,target\n0,1.0\n");
        let err = load_panel_csv(&x, None, &y).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_cell_lists_location() {
        let dir = tempfile::tempdir().unwrap();
        let x = write_tmp(
            dir.path(),
            "X.csv",
            "sample_id,series_id,time,value\n0,0,0,1.0\n0,0,2,3.0\n",
        );
        let y = write_tmp(dir.path(), "y.csv", "sample_id,target\n0,1.0\n");
        let err = load_panel_csv(&x, None, &y).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing cell") && msg.contains("time 1"), "{msg}");
    }

    #[test]
    fn non_numeric_value_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let x = write_tmp(
            dir.path(),
            "X.csv",
            "sample_id,series_id,time,value\n0,0,0,abc\n",
        );
        let y = write_tmp(dir.path(), "y.csv", "sample_id,target\n0,1.0\n");
        let err = load_panel_csv(&x, None, &y).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mut rng = crate::rng::Prng::new(21);
        let n = 7;
        let (m, steps, p) = (2, 5, 2);
        let x: Vec<f64> = (0..n * m * steps).map(|_| rng.next_normal() * 3.7).collect();
        let z: Vec<f64> = (0..n * p).map(|_| rng.next_normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.next_normal() * 0.01).collect();
        let ds = PanelDataset::new(m, steps, p, x, z, Targets::Continuous(y)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        write_panel_csv(&ds, dir.path(), "t").unwrap();
        let back = load_panel_csv(
            &dir.path().join("X_t.csv"),
            Some(&dir.path().join("Z_t.csv")),
            &dir.path().join("y_t.csv"),
        )
        .unwrap();
        assert_eq!(ds.x, back.x);
        assert_eq!(ds.z, back.z);
        assert_eq!(ds.targets, back.targets);
    }

    const TS_FIXTURE: &str = "\
#small hand-written fixture
@problemName tiny
@timeStamps false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 3
@classLabel true up down
@data
1.0,2.0,3.0:0.5,0.25,0.125:up
-1.0,-2.0,-3.0:4.0,5.0,6.0:down
";

    #[test]
    fn uea_ts_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "tiny.ts", TS_FIXTURE);
        let ds = load_uea_ts(&p).unwrap();
        assert_eq!((ds.n(), ds.m, ds.steps), (2, 2, 3));
        assert_eq!(
            ds.x,
            vec![1.0, 2.0, 3.0, 0.5, 0.25, 0.125, -1.0, -2.0, -3.0, 4.0, 5.0, 6.0]
        );
        match &ds.targets {
            Targets::Classes { labels, n_classes, names } => {
                assert_eq!(labels, &[0, 1]);
                assert_eq!(*n_classes, 2);
                assert_eq!(names, &["up", "down"]);
            }
            _ => panic!("expected class targets"),
        }
    }

    #[test]
    fn uea_ts_unknown_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "bad.ts",
            "@classLabel true a b\n@data\n1.0,2.0:c\n",
        );
        let err = load_uea_ts(&p).unwrap_err();
        assert!(err.to_string().contains("unknown class label"), "{err}");
    }

    #[test]
    fn uea_ts_unequal_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "bad.ts",
            "@equalLength false\n@classLabel true a\n@data\n1.0,2.0:a\n",
        );
        let err = load_uea_ts(&p).unwrap_err();
        assert!(err.to_string().contains("not supported"), "{err}");
    }

    #[test]
    fn cast_targets_validates() {
        let mut ds = PanelDataset::new(
            1,
            2,
            0,
            vec![0.0; 6],
            vec![],
            Targets::Continuous(vec![0.0, 1.0, 2.0]),
        )
        .unwrap();
        assert!(ds.clone().cast_targets(TargetKind::Binary).is_err());
        ds.cast_targets(TargetKind::MultiClass).unwrap();
        match ds.targets {
            Targets::Classes { n_classes, .. } => assert_eq!(n_classes, 3),
            _ => panic!(),
        }
    }
}
