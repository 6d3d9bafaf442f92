//! Demonstration datasets and their two on-disk layouts.
//!
//! Both layouts start with a header record (format version, environment
//! spec, seed, demo count, corruption level) followed by one record per demo.
//!
//! * JSON lines: the header object on the first line, then one demo object
//!   per line with integer-coded states (`[x, y, dir, gx, gy]`) and actions.
//! * Binary: `LEAPDS` magic, `u16` version, a length-prefixed JSON header,
//!   then per demo: `width u8, height u8, n_blocked u16, (x u8, y u8)*,
//!   n_doors u16, (x u8, y u8)*, optimal u8, n_actions u32, states
//!   (5 bytes each, n_actions + 1 of them), actions (1 byte each)`. All
//!   integers little-endian.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, EnvSpec, Layout};
use crate::oracle::{Demo, StateVec};

pub const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 6] = b"LEAPDS";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("unsupported dataset format version {0}")]
    Version(u16),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u16,
    pub spec: EnvSpec,
    pub seed: u64,
    pub m: usize,
    pub p_corrupt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: EnvSpec,
    pub seed: u64,
    pub p_corrupt: f64,
    pub demos: Vec<Demo>,
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    width: u8,
    height: u8,
    blocked: Vec<(u8, u8)>,
    closed_doors: Vec<(u8, u8)>,
    optimal: bool,
    states: Vec<[u8; 5]>,
    actions: Vec<u8>,
}

impl DemoRecord {
    fn from_demo(d: &Demo) -> Self {
        DemoRecord {
            width: d.layout.width,
            height: d.layout.height,
            blocked: d.layout.blocked.clone(),
            closed_doors: d.layout.closed_doors.clone(),
            optimal: d.optimal,
            states: d.states.iter().map(StateVec::to_array).collect(),
            actions: d.actions.iter().map(|a| a.code()).collect(),
        }
    }

    fn into_demo(self) -> Result<Demo, DatasetError> {
        if self.states.len() != self.actions.len() + 1 {
            return Err(DatasetError::Malformed(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        let states = self
            .states
            .into_iter()
            .map(|s| StateVec::from_array(s).ok_or_else(|| DatasetError::Malformed(format!("bad state {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let actions = self
            .actions
            .into_iter()
            .map(|c| Action::from_code(c).ok_or_else(|| DatasetError::Malformed(format!("bad action code {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Demo {
            layout: Layout {
                width: self.width,
                height: self.height,
                blocked: self.blocked,
                closed_doors: self.closed_doors,
            },
            states,
            actions,
            optimal: self.optimal,
        })
    }
}

impl Dataset {
    pub fn new(spec: EnvSpec, seed: u64, p_corrupt: f64, demos: Vec<Demo>) -> Self {
        Dataset {
            spec,
            seed,
            p_corrupt,
            demos,
        }
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            m: self.demos.len(),
            p_corrupt: self.p_corrupt,
        }
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Total number of action tokens over all demos.
    pub fn action_count(&self) -> usize {
        self.demos.iter().map(Demo::len).sum()
    }

    /// Concatenate demos of another dataset (header fields of `self` kept).
    pub fn extend(&mut self, other: Dataset) {
        self.demos.extend(other.demos);
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        serde_json::to_writer(&mut w, &self.header())?;
        w.write_all(b"\n")?;
        for d in &self.demos {
            serde_json::to_writer(&mut w, &DemoRecord::from_demo(d))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset, DatasetError> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| DatasetError::Malformed("missing header".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        if header.format_version != FORMAT_VERSION {
            return Err(DatasetError::Version(header.format_version));
        }
        let mut demos = Vec::with_capacity(header.m);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DemoRecord = serde_json::from_str(&line)?;
            demos.push(rec.into_demo()?);
        }
        finish(header, demos)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for d in &self.demos {
            w.write_all(&[d.layout.width, d.layout.height])?;
            for cells in [&d.layout.blocked, &d.layout.closed_doors] {
                w.write_all(&(cells.len() as u16).to_le_bytes())?;
                for &(x, y) in cells.iter() {
                    w.write_all(&[x, y])?;
                }
            }
            w.write_all(&[d.optimal as u8])?;
            w.write_all(&(d.actions.len() as u32).to_le_bytes())?;
            for s in &d.states {
                w.write_all(&s.to_array())?;
            }
            let codes: Vec<u8> = d.actions.iter().map(|a| a.code()).collect();
            w.write_all(&codes)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Dataset, DatasetError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Malformed("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != FORMAT_VERSION {
            return Err(DatasetError::Version(version));
        }
        let header_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: DatasetHeader = serde_json::from_slice(&header)?;
        let mut demos = Vec::with_capacity(header.m);
        for _ in 0..header.m {
            let [width, height] = read_array::<2>(&mut r)?;
            let mut lists = [Vec::new(), Vec::new()];
            for list in lists.iter_mut() {
                let n = u16::from_le_bytes(read_array(&mut r)?) as usize;
                let mut raw = vec![0u8; 2 * n];
                r.read_exact(&mut raw)?;
                *list = raw.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            }
            let [blocked, closed_doors] = lists;
            let [optimal] = read_array::<1>(&mut r)?;
            let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
            let mut raw_states = vec![0u8; 5 * (n + 1)];
            r.read_exact(&mut raw_states)?;
            let mut actions = vec![0u8; n];
            r.read_exact(&mut actions)?;
            let rec = DemoRecord {
                width,
                height,
                blocked,
                closed_doors,
                optimal: optimal != 0,
                states: raw_states
                    .chunks_exact(5)
                    .map(|c| [c[0], c[1], c[2], c[3], c[4]])
                    .collect(),
                actions,
            };
            demos.push(rec.into_demo()?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(DatasetError::Malformed(format!("{} trailing bytes", rest.len())));
        }
        finish(header, demos)
    }

    /// Save to `path`, choosing the layout from the extension (`.jsonl` or
    /// anything else for binary).
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let w = BufWriter::new(File::create(path)?);
        if is_jsonl(path) {
            self.write_jsonl(w)
        } else {
            self.write_binary(w)
        }
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let r = BufReader::new(File::open(path)?);
        if is_jsonl(path) {
            Dataset::read_jsonl(r)
        } else {
            Dataset::read_binary(r)
        }
    }
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn read_array<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn finish(header: DatasetHeader, demos: Vec<Demo>) -> Result<Dataset, DatasetError> {
    if demos.len() != header.m {
        return Err(DatasetError::Malformed(format!(
            "header announces {} demos, found {}",
            header.m,
            demos.len()
        )));
    }
    Ok(Dataset {
        spec: header.spec,
        seed: header.seed,
        p_corrupt: header.p_corrupt,
        demos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::generate_dataset;

    #[test]
    fn both_layouts_round_trip() {
        let ds = generate_dataset(&EnvSpec::maze_10x10(), 12, 0.25, 8).unwrap();
        let mut bin = Vec::new();
        ds.write_binary(&mut bin).unwrap();
        assert_eq!(Dataset::read_binary(&bin[..]).unwrap(), ds);
        let mut text = Vec::new();
        ds.write_jsonl(&mut text).unwrap();
        assert_eq!(Dataset::read_jsonl(&text[..]).unwrap(), ds);
        // Binary is the compact one.
        assert!(bin.len() < text.len());
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let ds = generate_dataset(&EnvSpec::local_7x7(), 3, 0.0, 8).unwrap();
        let mut bin = Vec::new();
        ds.write_binary(&mut bin).unwrap();
        assert!(Dataset::read_binary(&bin[..bin.len() - 1]).is_err());
        bin.push(0);
        assert!(Dataset::read_binary(&bin[..]).is_err());
        assert!(Dataset::read_binary(&b"NOTADS"[..]).is_err());
    }

    #[test]
    fn bad_action_code_is_rejected() {
        let line_header = r#"{"format_version":1,"spec":{"width":7,"height":7,"rooms":1,"obstacles":0,"lava":{"count":0},"dynamics":{"mode":"deterministic"},"closed_doors":false,"agent":null,"goal":null,"seed":0},"seed":0,"m":1,"p_corrupt":0.0}"#;
        let rec = r#"{"width":7,"height":7,"blocked":[],"closed_doors":[],"optimal":true,"states":[[1,1,0,2,2],[1,1,1,2,2]],"actions":[9]}"#;
        let text = format!("{line_header}\n{rec}\n");
        assert!(matches!(
            Dataset::read_jsonl(text.as_bytes()),
            Err(DatasetError::Malformed(_))
        ));
    }

    #[test]
    fn files_pick_layout_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&EnvSpec::local_7x7(), 4, 0.0, 2).unwrap();
        for name in ["d.jsonl", "d.bin"] {
            let p = dir.path().join(name);
            ds.save(&p).unwrap();
            assert_eq!(Dataset::load(&p).unwrap(), ds);
        }
    }
}
