//! Parsing of user-supplied inputs: policies and landmark CSV files.

use std::path::Path;

use faps_core::affine::{LandmarkSet, Point2};
use faps_core::geometry::{clip_policy, AlignmentPolicy, SearchSpace};

use crate::error::CliError;

/// Parses `m,delta` and checks it against `space`.
pub fn parse_policy(text: &str, space: &SearchSpace) -> Result<AlignmentPolicy, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [m, delta] = parts[..] else {
        return Err(CliError::usage(format!("policy must be `m,delta`, got `{text}`")));
    };
    let parse =
        |s: &str| s.parse::<i64>().map_err(|_| CliError::usage(format!("policy must be `m,delta`, got `{text}`")));
    let p = AlignmentPolicy::new(parse(m)?, parse(delta)?);
    if !space.contains(p) {
        return Err(CliError::usage(format!(
            "policy {p} is outside the search space; the nearest valid policy is {}",
            clip_policy(p, space)
        )));
    }
    Ok(p)
}

/// Reads `index,x,y` rows. A header row is allowed; indices must run
/// 0, 1, 2, ... in order.
pub fn read_landmarks(path: &Path) -> Result<LandmarkSet, CliError> {
    let bad = |msg: String| CliError::usage(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 3 {
            return Err(bad(format!("row {} has {} fields, expected index,x,y", line + 1, record.len())));
        }
        let Ok(index) = record[0].parse::<usize>() else {
            if line == 0 && points.is_empty() {
                continue;
            }
            return Err(bad(format!("row {}: index `{}` is not a non-negative integer", line + 1, &record[0])));
        };
        if index != points.len() {
            return Err(bad(format!("row {}: expected index {}, got {index}", line + 1, points.len())));
        }
        let coord = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: `{s}` is not a number", line + 1)));
        points.push(Point2::new(coord(&record[1])?, coord(&record[2])?));
    }
    LandmarkSet::new(points).map_err(|e| bad(e.to_string()))
}
