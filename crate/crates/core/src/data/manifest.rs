//! Tab-separated dataset manifest.
//!
//! ```text
//! path	identity	camera	track	split	landmarks
//! images/000000.ppm	0	0	0	train	wheel_front:40.5:44.25;lamp_front:33:50
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const HEADER: &str = "path\tidentity\tcamera\ttrack\tsplit\tlandmarks";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::format("manifest", format!("unknown split {s:?}"))),
        }
    }
}

/// A named point in pixel coordinates (`u` is the row, `v` the column).
#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub name: String,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub track: usize,
    pub split: Split,
    pub landmarks: Vec<Landmark>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

fn parse_landmarks(s: &str, line: usize) -> Result<Vec<Landmark>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let bad = || Error::format("manifest", format!("line {line}: bad landmark {item:?}"));
            if parts.len() != 3 || parts[0].is_empty() {
                return Err(bad());
            }
            Ok(Landmark {
                name: parts[0].to_string(),
                u: parts[1].parse().map_err(|_| bad())?,
                v: parts[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(Error::format("manifest", format!("first line must be {HEADER:?}"))),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let n = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::format("manifest", format!("line {n}: {} fields, expected 6", f.len())));
            }
            let int = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format("manifest", format!("line {n}: bad {what} {s:?}")))
            };
            records.push(Record {
                path: f[0].to_string(),
                identity: int(f[1], "identity")?,
                camera: int(f[2], "camera")?,
                track: int(f[3], "track")?,
                split: f[4].parse()?,
                landmarks: parse_landmarks(f[5], n)?,
            });
        }
        let m = Manifest { records };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.records {
            let lm: Vec<String> = r
                .landmarks
                .iter()
                .map(|l| format!("{}:{}:{}", l.name, l.u, l.v))
                .collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.path,
                r.identity,
                r.camera,
                r.track,
                r.split,
                lm.join(";")
            ));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Checks identity density, query coverage in the gallery and track consistency.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<usize> = self.records.iter().map(|r| r.identity).collect();
        if let Some(&max) = ids.iter().next_back() {
            if max + 1 != ids.len() {
                return Err(Error::format(
                    "manifest",
                    format!("identities are not dense: {} distinct values up to {}", ids.len(), max),
                ));
            }
        }
        let gallery: BTreeSet<usize> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Gallery)
            .map(|r| r.identity)
            .collect();
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.split == Split::Query && !gallery.contains(&r.identity))
        {
            return Err(Error::format(
                "manifest",
                format!("query identity {} has no gallery image", r.identity),
            ));
        }
        let mut tracks: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &self.records {
            let id = *tracks.entry(r.track).or_insert(r.identity);
            if id != r.identity {
                return Err(Error::format(
                    "manifest",
                    format!("track {} holds identities {} and {}", r.track, id, r.identity),
                ));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Record)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Training identities mapped to dense labels `0..n` in ascending order.
    pub fn train_labels(&self) -> BTreeMap<usize, usize> {
        let ids: BTreeSet<usize> = self.split(Split::Train).map(|(_, r)| r.identity).collect();
        ids.into_iter().enumerate().map(|(l, id)| (id, l)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, cam: usize, track: usize, split: Split) -> Record {
        Record {
            path: format!("img{id}_{cam}.ppm"),
            identity: id,
            camera: cam,
            track,
            split,
            landmarks: vec![Landmark {
                name: "wheel_front".into(),
                u: 40.25,
                v: 12.0,
            }],
        }
    }

    #[test]
    fn round_trip() {
        let m = Manifest {
            records: vec![
                rec(0, 0, 0, Split::Train),
                rec(1, 0, 1, Split::Query),
                Record {
                    landmarks: vec![],
                    ..rec(1, 1, 2, Split::Gallery)
                },
            ],
        };
        let text = m.to_tsv();
        assert!(text.starts_with(HEADER));
        assert_eq!(Manifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn invariants() {
        let sparse = Manifest {
            records: vec![rec(0, 0, 0, Split::Train), rec(2, 0, 1, Split::Train)],
        };
        assert!(sparse.validate().unwrap_err().to_string().contains("dense"));
        let orphan = Manifest {
            records: vec![rec(0, 0, 0, Split::Query)],
        };
        assert!(orphan.validate().unwrap_err().to_string().contains("no gallery"));
        let mixed = Manifest {
            records: vec![rec(0, 0, 0, Split::Train), rec(1, 0, 0, Split::Train)],
        };
        assert!(mixed.validate().unwrap_err().to_string().contains("track 0"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(Manifest::parse("path\tidentity\n").is_err());
        let bad = format!("{HEADER}\na.ppm\t0\t0\t0\tval\t\n");
        assert!(Manifest::parse(&bad).unwrap_err().to_string().contains("split"));
        let bad = format!("{HEADER}\na.ppm\t0\t0\t0\ttrain\tw:1\n");
        assert!(Manifest::parse(&bad).unwrap_err().to_string().contains("landmark"));
    }
}
