//! Demonstration files and atomic output.
//!
//! A demonstration set is a JSON object
//!
//! ```json
//! {"schema_version": 1, "dt": 0.01,
//!  "object_frame": {"translation": [2.0, 0.0], "heading": 3.14159},
//!  "demos": [[[0, 1.2, 0.3, 0.5], [1, 1.2, 0.3, 0.5]]]}
//! ```
//!
//! where every row is `[t, x, y, heading]` in the plane or
//! `[t, x, y, z, qw, qx, qy, qz]` in space. Timesteps are integers. The CSV
//! form carries the same columns after a leading demo index.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::charts::{CartesianPose, RigidTransform, Space};
use crate::error::{Error, Result};
use crate::phase::Demonstration;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSetFile {
    pub schema_version: u32,
    pub dt: f64,
    pub object_frame: RigidTransform,
    pub demos: Vec<Vec<Vec<f64>>>,
    /// Settings that produced the set, kept for provenance only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Number of columns in a row, timestep included.
pub fn row_width(space: Space) -> usize {
    match space {
        Space::TwoD => 4,
        Space::ThreeD => 8,
    }
}

pub fn pose_row(t: usize, pose: &CartesianPose) -> Vec<f64> {
    match pose {
        CartesianPose::Planar { position, heading } => vec![t as f64, position.x, position.y, heading.angle()],
        CartesianPose::Spatial {
            position,
            orientation,
        } => {
            let q = orientation.quaternion();
            vec![t as f64, position.x, position.y, position.z, q.w, q.i, q.j, q.k]
        }
    }
}

pub fn parse_row(row: &[f64], space: Space) -> Result<(usize, CartesianPose)> {
    let width = row_width(space);
    if row.len() != width {
        return Err(Error::Schema(format!("expected {width} columns, found {}", row.len())));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Schema("non-finite value".into()));
    }
    let t = row[0];
    if t < 0.0 || t.fract() != 0.0 {
        return Err(Error::Schema(format!("timestep {t} is not a non-negative integer")));
    }
    let pose = match space {
        Space::TwoD => CartesianPose::planar(row[1], row[2], row[3]),
        Space::ThreeD => {
            let q = Quaternion::new(row[4], row[5], row[6], row[7]);
            if (q.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Schema(format!("quaternion norm {} is not 1", q.norm())));
            }
            CartesianPose::spatial(Vector3::new(row[1], row[2], row[3]), UnitQuaternion::from_quaternion(q))
        }
    };
    Ok((t as usize, pose))
}

impl DemoSetFile {
    /// Demonstrations must share `dt` and the object frame.
    pub fn from_demos(demos: &[Demonstration]) -> Result<Self> {
        let first = demos.first().ok_or(Error::EmptyInput)?;
        if demos.iter().any(|d| d.dt != first.dt || d.object_frame != first.object_frame) {
            return Err(Error::InvalidArgument(
                "demonstrations in one set must share dt and object frame".into(),
            ));
        }
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            dt: first.dt,
            object_frame: first.object_frame,
            demos: demos
                .iter()
                .map(|d| d.frames().iter().map(|(t, p)| pose_row(*t, p)).collect())
                .collect(),
            config: None,
        })
    }

    /// Demos are named `<prefix>-<index>`.
    pub fn into_demos(self, prefix: &str) -> Result<Vec<Demonstration>> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.demos.is_empty() {
            return Err(Error::EmptyInput);
        }
        let space = self.object_frame.space();
        self.demos
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                let id = format!("{prefix}-{i}");
                let frames = rows
                    .iter()
                    .enumerate()
                    .map(|(f, row)| {
                        parse_row(row, space).map_err(|e| Error::Demo {
                            id: id.clone(),
                            frame: f,
                            source: Box::new(e),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Demonstration::new(id, self.dt, frames, self.object_frame)
            })
            .collect()
    }
}

pub fn demos_to_json(demos: &[Demonstration]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&DemoSetFile::from_demos(demos)?)?)
}

pub fn demos_from_json(text: &str, prefix: &str) -> Result<Vec<Demonstration>> {
    serde_json::from_str::<DemoSetFile>(text)?.into_demos(prefix)
}

/// Reads CSV rows `demo, t, x, y, ...` with a header line; `#` lines are
/// comments. Demo indices group rows; groups are returned in order of first
/// appearance.
pub fn demos_from_csv(text: &str, dt: f64, object_frame: RigidTransform, prefix: &str) -> Result<Vec<Demonstration>> {
    let space = object_frame.space();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut groups: Vec<(String, Vec<(usize, CartesianPose)>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("csv row {}: {e}", line + 1)))?;
        let mut fields = record.iter();
        let demo = fields
            .next()
            .ok_or_else(|| Error::Schema(format!("csv row {}: empty", line + 1)))?
            .to_string();
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Schema(format!("csv row {}: {e}", line + 1)))?;
        let frame = parse_row(&values, space).map_err(|e| Error::Schema(format!("csv row {}: {e}", line + 1)))?;
        match groups.iter_mut().find(|(d, _)| *d == demo) {
            Some((_, frames)) => frames.push(frame),
            None => groups.push((demo, vec![frame])),
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    groups
        .into_iter()
        .map(|(demo, frames)| Demonstration::new(format!("{prefix}-{demo}"), dt, frames, object_frame))
        .collect()
}

/// Loads a demonstration set file, or every `*.json` file in a directory
/// in name order.
pub fn read_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyInput);
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut demos = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        let prefix = file.file_stem().and_then(|s| s.to_str()).unwrap_or("demo");
        demos.extend(demos_from_json(&text, prefix)?);
    }
    Ok(demos)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_demos, Symmetry, TaskSpec};

    #[test]
    fn json_round_trip_2d_and_3d() {
        for spec in [TaskSpec::grasp2d(), TaskSpec::grasp_pose3d(Symmetry::Spherical)] {
            let demos = generate_demos(&spec).unwrap();
            let text = demos_to_json(&demos).unwrap();
            let back = demos_from_json(&text, "demo").unwrap();
            assert_eq!(back.len(), demos.len());
            for (a, b) in demos.iter().zip(&back) {
                assert_eq!(a.frames().len(), b.frames().len());
                for ((ta, pa), (tb, pb)) in a.frames().iter().zip(b.frames()) {
                    assert_eq!(ta, tb);
                    assert!((pa.position() - pb.position()).norm() < 1e-12);
                    let (ra, rb) = (pose_row(0, pa), pose_row(0, pb));
                    assert!(ra.iter().zip(&rb).all(|(x, y)| (x - y).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_schema_version_and_widths() {
        let ok = r#"{"schema_version":1,"dt":0.1,"object_frame":{"translation":[0,0],"heading":0},"demos":[[[0,1,0,0],[1,1,0,0]]]}"#;
        assert_eq!(demos_from_json(ok, "d").unwrap().len(), 1);
        let bad_version = ok.replace("\"schema_version\":1", "\"schema_version\":7");
        assert!(matches!(demos_from_json(&bad_version, "d"), Err(Error::Schema(_))));
        let bad_width = ok.replace("[1,1,0,0]", "[1,1,0]");
        assert!(matches!(demos_from_json(&bad_width, "d"), Err(Error::Demo { frame: 1, .. })));
        let bad_time = ok.replace("[1,1,0,0]", "[1.5,1,0,0]");
        assert!(demos_from_json(&bad_time, "d").is_err());
        let unknown = ok.replace("\"dt\"", "\"extra\":1,\"dt\"");
        assert!(matches!(demos_from_json(&unknown, "d"), Err(Error::Json(_))));
    }

    #[test]
    fn csv_groups_rows_by_demo() {
        let text = "# note\ndemo,t,x,y,heading\n0,0,1,0,0\n1,0,2,0,0\n0,1,1.1,0,0\n1,1,2.1,0,0.1\n";
        let demos = demos_from_csv(text, 0.01, RigidTransform::identity(Space::TwoD), "csv").unwrap();
        assert_eq!(demos.len(), 2);
        assert_eq!(demos[1].id, "csv-1");
        assert!((demos[1].frames()[1].1.position()[0] - 2.1).abs() < 1e-15);
        assert!(demos_from_csv("demo,t,x,y,heading\n0,0,1,zz,0\n", 0.01, RigidTransform::identity(Space::TwoD), "c").is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("out.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
