//! Long-format CSV datasets: one column per mode plus a value column.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfaError};
use crate::meanmodel::PpLevels;
use crate::scalar::Scalar;
use crate::tensor::{multi_index, DenseTensor, MaskedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Country,
    Period,
    Sex,
    Age,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    /// Column holding this mode's level labels.
    pub name: String,
    /// Explicit level order; first-appearance order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    /// Role in the piecewise-polynomial mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Values are used as read.
    #[default]
    None,
    /// Natural log applied on load.
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub modes: Vec<ModeSpec>,
    pub value: String,
    #[serde(default)]
    pub transform: Transform,
}

impl DatasetSchema {
    /// Schema with modes `i1, i2, ...`, value column `y` and no pinned levels.
    pub fn generic(order: usize) -> Self {
        Self {
            modes: (1..=order)
                .map(|i| ModeSpec {
                    name: format!("i{}", i),
                    levels: None,
                    role: None,
                })
                .collect(),
            value: "y".into(),
            transform: Transform::None,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = serde_json::from_reader(File::open(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(SfaError::Schema("at least one mode is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.modes {
            if !seen.insert(m.name.as_str()) || m.name == self.value {
                return Err(SfaError::Schema(format!("column {} is used twice", m.name)));
            }
            if let Some(levels) = &m.levels {
                let mut lv = std::collections::HashSet::new();
                if let Some(d) = levels.iter().find(|l| !lv.insert(l.as_str())) {
                    return Err(SfaError::Schema(format!("level {} repeated in mode {}", d, m.name)));
                }
            }
        }
        Ok(())
    }

    pub fn mode_names(&self) -> Vec<String> {
        self.modes.iter().map(|m| m.name.clone()).collect()
    }

    /// Levels for the piecewise-polynomial mean. Modes are matched by role, or
    /// taken in order country, period, sex, age when no roles are given.
    /// Age labels must start with the group's starting age (`"0"`, `"1-4"`, `"105+"`).
    pub fn pp_levels(&self, levels: &[Vec<String>]) -> Result<PpLevels> {
        if self.modes.len() != 4 || levels.len() != 4 {
            return Err(SfaError::Schema("the piecewise-polynomial mean needs a 4-way array".into()));
        }
        let find = |role: Role, default: usize| -> Result<usize> {
            if self.modes.iter().all(|m| m.role.is_none()) {
                return Ok(default);
            }
            self.modes
                .iter()
                .position(|m| m.role == Some(role))
                .ok_or_else(|| SfaError::Schema(format!("no mode has role {:?}", role)))
        };
        let idx = [
            find(Role::Country, 0)?,
            find(Role::Period, 1)?,
            find(Role::Sex, 2)?,
            find(Role::Age, 3)?,
        ];
        if idx != [0, 1, 2, 3] {
            return Err(SfaError::Schema(
                "modes must be ordered country, period, sex, age for the piecewise-polynomial mean".into(),
            ));
        }
        let ages = levels[3]
            .iter()
            .map(|l| parse_age(l).ok_or_else(|| SfaError::Schema(format!("age label {} has no leading number", l))))
            .collect::<Result<Vec<_>>>()?;
        Ok(PpLevels {
            countries: levels[0].clone(),
            periods: levels[1].clone(),
            sexes: levels[2].clone(),
            ages,
        })
    }
}

fn parse_age(label: &str) -> Option<f64> {
    let t = label.trim();
    let end = t.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(t.len());
    t[..end].parse().ok()
}

/// An array with its level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub data: MaskedTensor<T>,
    pub levels: Vec<Vec<String>>,
}

pub fn load_long_csv<T: Scalar>(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset<T>> {
    read_long_csv(File::open(path)?, schema)
}

/// Reads a long CSV. Cells without a row, or with an empty value, are missing.
/// Row numbers in errors count the header as row 1.
pub fn read_long_csv<T: Scalar, R: Read>(reader: R, schema: &DatasetSchema) -> Result<Dataset<T>> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SfaError::Schema(format!("column {} not found in the header", name)))
    };
    let mode_cols = schema.modes.iter().map(|m| col(&m.name)).collect::<Result<Vec<_>>>()?;
    let value_col = col(&schema.value)?;

    let k = schema.modes.len();
    let mut levels: Vec<Vec<String>> = schema.modes.iter().map(|m| m.levels.clone().unwrap_or_default()).collect();
    let mut lookup: Vec<HashMap<String, usize>> = levels
        .iter()
        .map(|l| l.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect())
        .collect();
    let mut entries: Vec<(Vec<usize>, Option<f64>, usize)> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec?;
        let mut idx = Vec::with_capacity(k);
        for i in 0..k {
            let label = rec
                .get(mode_cols[i])
                .ok_or_else(|| SfaError::Parse { row, msg: "too few fields".into() })?;
            let pos = match lookup[i].get(label) {
                Some(&p) => p,
                None if schema.modes[i].levels.is_some() => {
                    return Err(SfaError::Parse {
                        row,
                        msg: format!("unknown level {} for mode {}", label, schema.modes[i].name),
                    })
                }
                None => {
                    levels[i].push(label.to_string());
                    lookup[i].insert(label.to_string(), levels[i].len() - 1);
                    levels[i].len() - 1
                }
            };
            idx.push(pos);
        }
        let raw = rec
            .get(value_col)
            .ok_or_else(|| SfaError::Parse { row, msg: "too few fields".into() })?;
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            let v: f64 = raw.parse().map_err(|_| SfaError::Parse {
                row,
                msg: format!("value {:?} is not a number", raw),
            })?;
            Some(match schema.transform {
                Transform::None => v,
                Transform::Log if v > 0.0 => v.ln(),
                Transform::Log => {
                    return Err(SfaError::Parse {
                        row,
                        msg: format!("value {} cannot be log-transformed", v),
                    })
                }
            })
        };
        entries.push((idx, value, row));
    }

    let dims: Vec<usize> = levels.iter().map(|l| l.len()).collect();
    if dims.iter().any(|&d| d == 0) {
        return Err(SfaError::Schema("a mode has no levels".into()));
    }
    let mut data = vec![T::zero(); dims.iter().product()];
    let mut mask = vec![false; data.len()];
    let mut seen_row: Vec<Option<usize>> = vec![None; data.len()];
    for (idx, value, row) in entries {
        let c = crate::tensor::linear_index(&dims, &idx);
        if let Some(first) = seen_row[c] {
            return Err(SfaError::Parse {
                row,
                msg: format!("duplicate cell, first given at row {}", first),
            });
        }
        seen_row[c] = Some(row);
        if let Some(v) = value {
            data[c] = T::of(v);
            mask[c] = true;
        }
    }
    Ok(Dataset {
        data: MaskedTensor::new(DenseTensor::new(dims, data)?, mask)?,
        levels,
    })
}

/// Writes every cell in array order; missing cells get an empty value. Values
/// are written as stored, i.e. after any transform applied on load.
pub fn write_long_csv<T: Scalar, W: Write>(w: W, data: &MaskedTensor<T>, levels: &[Vec<String>], schema: &DatasetSchema) -> Result<()> {
    let dims = data.dims();
    if levels.len() != dims.len() || levels.iter().zip(dims).any(|(l, &d)| l.len() != d) || schema.modes.len() != dims.len() {
        return Err(SfaError::Shape("levels or schema do not match the array".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = schema.mode_names();
    header.push(schema.value.clone());
    wtr.write_record(&header)?;
    for (c, (&v, &obs)) in data.tensor().data().iter().zip(data.mask()).enumerate() {
        let idx = multi_index(dims, c);
        let mut rec: Vec<String> = idx.iter().enumerate().map(|(i, &j)| levels[i][j].clone()).collect();
        rec.push(if obs { format!("{}", v.f64()) } else { String::new() });
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Default level labels `1, 2, ...` for each mode.
pub fn numbered_levels(dims: &[usize]) -> Vec<Vec<String>> {
    dims.iter().map(|&d| (1..=d).map(|i| i.to_string()).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema2() -> DatasetSchema {
        serde_json::from_str(r#"{"modes":[{"name":"a"},{"name":"b"}],"value":"y"}"#).unwrap()
    }

    #[test]
    fn complete_grid() {
        let csv = "a,b,y\nx,p,1\nx,q,2\nz,p,3\nz,q,4\n";
        let d: Dataset<f64> = read_long_csv(csv.as_bytes(), &schema2()).unwrap();
        assert_eq!(d.data.dims(), &[2, 2]);
        assert!(d.data.is_complete());
        assert_eq!(d.data.tensor().get(&[1, 0]), 3.0);
        assert_eq!(d.levels[1], vec!["p", "q"]);
    }

    #[test]
    fn absent_row_is_missing() {
        let csv = "a,b,y\nx,p,1\nx,q,2\nz,p,3\n";
        let d: Dataset<f64> = read_long_csv(csv.as_bytes(), &schema2()).unwrap();
        assert_eq!(d.data.n_missing(), 1);
        assert!(!d.data.mask()[3]);
        let csv = "a,b,y\nx,p,1\nx,q,\nz,p,3\nz,q,4\n";
        let d: Dataset<f64> = read_long_csv(csv.as_bytes(), &schema2()).unwrap();
        assert_eq!(d.data.n_missing(), 1);
    }

    #[test]
    fn errors_name_rows() {
        let dup = "a,b,y\nx,p,1\nx,q,2\nx,p,3\n";
        match read_long_csv::<f64, _>(dup.as_bytes(), &schema2()) {
            Err(SfaError::Parse { row, msg }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{:?}", other),
        }
        let bad = "a,b,y\nx,p,one\n";
        assert!(matches!(read_long_csv::<f64, _>(bad.as_bytes(), &schema2()), Err(SfaError::Parse { row: 2, .. })));
        let missing_col = "a,c,y\nx,p,1\n";
        assert!(matches!(read_long_csv::<f64, _>(missing_col.as_bytes(), &schema2()), Err(SfaError::Schema(_))));
    }

    #[test]
    fn pinned_levels_and_log() {
        let schema: DatasetSchema = serde_json::from_str(
            r#"{"modes":[{"name":"a","levels":["z","x"]},{"name":"b"}],"value":"y","transform":"log"}"#,
        )
        .unwrap();
        let csv = "b,a,y\np,x,1\np,z,2.718281828459045\n";
        let d: Dataset<f64> = read_long_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.levels[0], vec!["z", "x"]);
        assert!((d.data.tensor().get(&[0, 0]) - 1.0).abs() < 1e-15);
        assert_eq!(d.data.tensor().get(&[1, 0]), 0.0);
        let unknown = "b,a,y\np,w,1\n";
        assert!(read_long_csv::<f64, _>(unknown.as_bytes(), &schema).is_err());
        let neg = "b,a,y\np,x,-1\n";
        assert!(read_long_csv::<f64, _>(neg.as_bytes(), &schema).is_err());
    }

    #[test]
    fn pp_levels_from_labels() {
        let schema = DatasetSchema::generic(4);
        let levels = vec![
            vec!["c1".into()],
            vec!["1990".into()],
            vec!["f".into()],
            vec!["0".into(), "1-4".into(), "105+".into()],
        ];
        let pp = schema.pp_levels(&levels).unwrap();
        assert_eq!(pp.ages, vec![0.0, 1.0, 105.0]);
        assert!(DatasetSchema::generic(3).pp_levels(&levels[..3]).is_err());
    }

    #[test]
    fn schema_rejects_duplicates() {
        let s: DatasetSchema = serde_json::from_str(r#"{"modes":[{"name":"a"},{"name":"a"}],"value":"y"}"#).unwrap();
        assert!(s.validate().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let t = DenseTensor::new(dims.clone(), (0..n).map(|_| rng.random_range(-1e3..1e3) * rng.random::<f64>()).collect()).unwrap();
            let mask: Vec<bool> = (0..n).map(|c| c == 0 || rng.random_bool(0.8)).collect();
            let mut masked = MaskedTensor::new(t, mask.clone()).unwrap();
            // Missing cells are stored as zero after loading.
            let (mut t, m) = masked.into_parts();
            for (v, &o) in t.data_mut().iter_mut().zip(&m) {
                if !o { *v = 0.0; }
            }
            masked = MaskedTensor::new(t, m).unwrap();
            let schema = DatasetSchema::generic(dims.len());
            let levels = numbered_levels(&dims);
            let mut buf = Vec::new();
            write_long_csv(&mut buf, &masked, &levels, &schema).unwrap();
            let back: Dataset<f64> = read_long_csv(buf.as_slice(), &schema).unwrap();
            prop_assert_eq!(back.levels, levels);
            prop_assert_eq!(back.data.mask(), masked.mask());
            for (a, b) in back.data.tensor().data().iter().zip(masked.tensor().data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
