//! Dataset CSV and parameter JSON formats.
//!
//! Dataset files start with a `d,m,k,loss` row followed by one row per
//! instance, `x_1,...,x_d,y_1,...,y_k` (a single class index for
//! cross-entropy data). Parameters are a flat JSON document with explicit
//! shapes and row-major weight arrays.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Dataset, DeepParams, HiddenLayer, LossKind, NetParams, Targets, TwoLayerParams};

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

pub fn dataset_to_csv(data: &Dataset) -> String {
    let (k, loss) = match data.targets() {
        Targets::Scalar(_) => (1, LossKind::Squared),
        Targets::Vector(y) => (y.ncols(), LossKind::Squared),
        Targets::Classes { classes, .. } => (*classes, LossKind::CrossEntropy),
    };
    let mut out = format!("{},{},{},{}\n", data.d(), data.m(), k, loss.name());
    for t in 0..data.m() {
        let mut fields: Vec<String> = data.x().row(t).iter().map(|&v| fmt(v)).collect();
        match data.targets() {
            Targets::Scalar(y) => fields.push(fmt(y[t])),
            Targets::Vector(y) => fields.extend(y.row(t).iter().map(|&v| fmt(v))),
            Targets::Classes { labels, .. } => fields.push(labels[t].to_string()),
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn parse_usize(field: &str, line: usize, col: usize, what: &str) -> Result<usize> {
    field.trim().parse::<usize>().map_err(|_| {
        Error::parse(
            format!("line {line}, column {col}"),
            format!("expected a non-negative integer for {what}, found {field:?}"),
        )
    })
}

fn parse_f64(field: &str, line: usize, col: usize) -> Result<f64> {
    let v = field.trim().parse::<f64>().map_err(|_| {
        Error::parse(
            format!("line {line}, column {col}"),
            format!("expected a number, found {field:?}"),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::parse(
            format!("line {line}, column {col}"),
            "non-finite value",
        ));
    }
    Ok(v)
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty dataset file"))?;
    let h: Vec<&str> = header.split(',').collect();
    if h.len() != 4 {
        return Err(Error::parse(
            format!("line {hline}"),
            format!("header needs 4 fields d,m,k,loss, found {}", h.len()),
        ));
    }
    let d = parse_usize(h[0], hline, 1, "d")?;
    let m = parse_usize(h[1], hline, 2, "m")?;
    let k = parse_usize(h[2], hline, 3, "k")?;
    let loss = LossKind::parse(h[3]).ok_or_else(|| {
        Error::parse(
            format!("line {hline}, column 4"),
            format!("unknown loss {:?}", h[3].trim()),
        )
    })?;
    if d == 0 || m == 0 || k == 0 {
        return Err(Error::parse(format!("line {hline}"), "d, m and k must be positive"));
    }
    let width = match loss {
        LossKind::Squared => d + k,
        LossKind::CrossEntropy => d + 1,
    };
    let mut x = DMatrix::zeros(m, d);
    let mut yv = DMatrix::zeros(m, k);
    let mut labels = Vec::with_capacity(m);
    let mut count = 0;
    for (line, row) in lines {
        if count == m {
            return Err(Error::parse(
                format!("line {line}"),
                format!("more than the declared {m} instances"),
            ));
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != width {
            return Err(Error::parse(
                format!("line {line}"),
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        for j in 0..d {
            x[(count, j)] = parse_f64(fields[j], line, j + 1)?;
        }
        match loss {
            LossKind::Squared => {
                for c in 0..k {
                    yv[(count, c)] = parse_f64(fields[d + c], line, d + c + 1)?;
                }
            }
            LossKind::CrossEntropy => {
                let label = parse_usize(fields[d], line, d + 1, "class index")?;
                if label >= k {
                    return Err(Error::parse(
                        format!("line {line}, column {}", d + 1),
                        format!("class index {label} >= k = {k}"),
                    ));
                }
                labels.push(label);
            }
        }
        count += 1;
    }
    if count != m {
        return Err(Error::parse(
            "end of file",
            format!("header declares {m} instances but {count} were found"),
        ));
    }
    let targets = match (loss, k) {
        (LossKind::CrossEntropy, _) => Targets::Classes { labels, classes: k },
        (LossKind::Squared, 1) => Targets::Scalar(yv.column(0).iter().copied().collect()),
        (LossKind::Squared, _) => Targets::Vector(yv),
    };
    Dataset::new(x, targets)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    dataset_from_csv(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_csv(data))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    #[serde(rename = "W")]
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ParamsDoc {
    TwoLayer {
        n: usize,
        d: usize,
        #[serde(rename = "W")]
        w: Vec<f64>,
        v: Vec<f64>,
    },
    Deep {
        layers: Vec<LayerDoc>,
        output: MatrixDoc,
    },
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::parse(
            what.to_string(),
            format!("declared {rows}x{cols} but {} values given", data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

pub fn params_to_json(params: &NetParams) -> String {
    let doc = match params {
        NetParams::TwoLayer(p) => ParamsDoc::TwoLayer {
            n: p.width(),
            d: p.input_dim(),
            w: row_major(&p.w),
            v: p.v.iter().copied().collect(),
        },
        NetParams::Deep(p) => ParamsDoc::Deep {
            layers: p
                .hidden
                .iter()
                .map(|l| LayerDoc {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    w: row_major(&l.w),
                    b: l.b.iter().copied().collect(),
                })
                .collect(),
            output: MatrixDoc {
                rows: p.output.nrows(),
                cols: p.output.ncols(),
                w: row_major(&p.output),
            },
        },
    };
    serde_json::to_string_pretty(&doc).expect("parameter documents always serialize")
}

pub fn params_from_json(text: &str) -> Result<NetParams> {
    let doc: ParamsDoc = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    match doc {
        ParamsDoc::TwoLayer { n, d, w, v } => {
            let w = from_row_major(n, d, &w, "W")?;
            if v.len() != n {
                return Err(Error::parse("v", format!("expected {n} values, found {}", v.len())));
            }
            Ok(NetParams::TwoLayer(TwoLayerParams::new(w, DVector::from_vec(v))?))
        }
        ParamsDoc::Deep { layers, output } => {
            let mut hidden = Vec::with_capacity(layers.len());
            for (i, l) in layers.into_iter().enumerate() {
                let w = from_row_major(l.rows, l.cols, &l.w, &format!("layers[{i}].W"))?;
                if l.b.len() != l.rows {
                    return Err(Error::parse(
                        format!("layers[{i}].b"),
                        format!("expected {} values, found {}", l.rows, l.b.len()),
                    ));
                }
                hidden.push(HiddenLayer {
                    w,
                    b: DVector::from_vec(l.b),
                });
            }
            let out = from_row_major(output.rows, output.cols, &output.w, "output.W")?;
            Ok(NetParams::Deep(DeepParams::new(hidden, out)?))
        }
    }
}

pub fn read_params(path: &Path) -> Result<NetParams> {
    let text = fs::read_to_string(path)?;
    params_from_json(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_params(path: &Path, params: &NetParams) -> Result<()> {
    fs::write(path, params_to_json(params))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_dataset_round_trip() {
        let x = DMatrix::from_row_slice(2, 2, &[0.1, -1.0 / 3.0, 1e-300, 12345.678901234567]);
        let data = Dataset::scalar(x, vec![0.30000000000000004, -2.5]).unwrap();
        let text = dataset_to_csv(&data);
        assert!(text.starts_with("2,2,1,squared\n"));
        assert_eq!(dataset_from_csv(&text).unwrap(), data);
    }

    #[test]
    fn class_dataset_round_trip() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let data = Dataset::new(x, Targets::Classes { labels: vec![0, 2, 1], classes: 3 }).unwrap();
        assert_eq!(dataset_from_csv(&dataset_to_csv(&data)).unwrap(), data);
    }

    #[test]
    fn malformed_rows_name_their_location() {
        let err = dataset_from_csv("2,2,1,squared\n1,2,3\n1,x,3\n").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 3, column 2"),
            other => panic!("{other:?}"),
        }
        assert!(dataset_from_csv("2,3,1,squared\n1,2,3\n").is_err());
        assert!(dataset_from_csv("2,1,1,hinge\n1,2,3\n").is_err());
    }

    #[test]
    fn params_round_trip() {
        let p = NetParams::TwoLayer(
            TwoLayerParams::from_rows(&[vec![0.1, 0.2], vec![-1.0 / 7.0, 3.0]], &[1.0, -0.5]).unwrap(),
        );
        assert_eq!(params_from_json(&params_to_json(&p)).unwrap(), p);
        let deep = NetParams::Deep(
            DeepParams::new(
                vec![HiddenLayer {
                    w: DMatrix::from_row_slice(2, 1, &[0.5, -0.25]),
                    b: DVector::from_vec(vec![0.1, 1.0 / 3.0]),
                }],
                DMatrix::from_row_slice(1, 2, &[2.0, -1.0]),
            )
            .unwrap(),
        );
        assert_eq!(params_from_json(&params_to_json(&deep)).unwrap(), deep);
    }

    #[test]
    fn params_shape_errors() {
        let bad = r#"{"kind":"two_layer","n":2,"d":2,"W":[1,2,3],"v":[1,1]}"#;
        assert!(matches!(params_from_json(bad), Err(Error::Parse { .. })));
    }
}
