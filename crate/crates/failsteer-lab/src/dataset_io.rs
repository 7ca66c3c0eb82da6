//! Line-delimited trajectory files: a JSON header line with the record
//! count, then one JSON trajectory per line. Loading is atomic — any
//! malformed or missing line fails the whole load with its line number.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use failsteer_core::data::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

const FORMAT: &str = "failsteer-dataset";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

pub fn save_dataset(path: &Path, trajectories: &[Trajectory]) -> LabResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(LabError::io(dir))?;
    }
    let file = std::fs::File::create(path).map_err(LabError::io(path))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        count: trajectories.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(LabError::io(path))?;
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(LabError::io(path))?;
    }
    w.flush().map_err(LabError::io(path))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> LabResult<Vec<Trajectory>> {
    let file = std::fs::File::open(path).map_err(LabError::io(path))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, first) = lines.next().ok_or(LabError::Parse {
        line: 1,
        msg: "empty file, expected a header line".into(),
    })?;
    let first = first.map_err(LabError::io(path))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| LabError::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(LabError::Parse {
            line: 1,
            msg: format!(
                "unsupported format {}/{}, expected {FORMAT}/{VERSION}",
                header.format, header.version
            ),
        });
    }

    let mut out = Vec::with_capacity(header.count);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(LabError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| LabError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        traj.validate().map_err(|e| LabError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(traj);
    }
    if out.len() != header.count {
        return Err(LabError::Parse {
            line: out.len() + 1,
            msg: format!(
                "truncated dataset: header says {} records, found {}",
                header.count,
                out.len()
            ),
        });
    }
    Ok(out)
}
