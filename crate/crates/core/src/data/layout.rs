//! Directory layouts and split protocols.
//!
//! CASIA-B convention: `root/<subject>/<cond>-<run>/<view>/<frames>`, e.g.
//! `001/nm-01/090/001.png`. OU-MVLP convention: `root/<subject>/<view>_<run>/<frames>`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Nm,
    Bg,
    Cl,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Nm, Condition::Bg, Condition::Cl];

    pub fn tag(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag().to_uppercase())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            other => Err(Error::Config(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Gallery,
    Probe,
    /// Test-subject sequences the protocol does not use.
    Unused,
}

/// Assigns splits from subject id and sequence tag.
#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Subjects 1–74 train; test gallery NM-01..04; probes NM-05/06, BG-01/02, CL-01/02.
    CasiaB,
    /// Subjects up to `train_subjects` train; test gallery NM runs up to
    /// `gallery_runs`, the remaining NM runs are probes.
    Synthetic {
        train_subjects: u32,
        gallery_runs: u32,
    },
    /// Subjects up to `train_subjects` train; test gallery run 0, probe run 1.
    OuMvlp { train_subjects: u32 },
}

impl Protocol {
    pub fn split(&self, subject: u32, condition: Condition, run: u32) -> Split {
        match *self {
            Protocol::CasiaB => {
                if subject <= 74 {
                    Split::Train
                } else {
                    match (condition, run) {
                        (Condition::Nm, 1..=4) => Split::Gallery,
                        (Condition::Nm, 5..=6) | (Condition::Bg | Condition::Cl, 1..=2) => {
                            Split::Probe
                        }
                        _ => Split::Unused,
                    }
                }
            }
            Protocol::Synthetic {
                train_subjects,
                gallery_runs,
            } => {
                if subject <= train_subjects {
                    Split::Train
                } else if condition != Condition::Nm {
                    Split::Unused
                } else if run <= gallery_runs {
                    Split::Gallery
                } else {
                    Split::Probe
                }
            }
            Protocol::OuMvlp { train_subjects } => {
                if subject <= train_subjects {
                    Split::Train
                } else if run == 0 {
                    Split::Gallery
                } else if run == 1 {
                    Split::Probe
                } else {
                    Split::Unused
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub subject: u32,
    pub condition: Condition,
    pub run: u32,
    pub view: u32,
    pub dir: PathBuf,
    /// Frame files, sorted by name.
    pub frames: Vec<PathBuf>,
    pub split: Split,
}

impl Record {
    pub fn label(&self) -> String {
        format!(
            "{:03}/{}-{:02}/{:03}",
            self.subject,
            self.condition.tag(),
            self.run,
            self.view
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn subjects(&self, split: Split) -> Vec<u32> {
        let mut s: Vec<u32> = self.split(split).map(|r| r.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn views(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.records.iter().map(|r| r.view).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "pgm")
    )
}

fn visible_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

pub(crate) fn frames_in(dir: &Path, bad: &mut Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for p in visible_entries(dir)? {
        if p.is_file() && is_frame_file(&p) {
            frames.push(p);
        } else {
            bad.push(p);
        }
    }
    Ok(frames)
}

fn name_of(p: &Path) -> &str {
    p.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn parse_number(s: &str) -> Option<u32> {
    (!s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()))
        .then(|| s.parse().ok())
        .flatten()
}

/// Subject directories under `root`; loose files at the top level (such as an
/// echoed configuration) are ignored.
fn subject_dirs(root: &Path, bad: &mut Vec<PathBuf>) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for p in visible_entries(root)? {
        if !p.is_dir() {
            continue;
        }
        match parse_number(name_of(&p)) {
            Some(s) => out.push((s, p)),
            None => bad.push(p),
        }
    }
    Ok(out)
}

fn finish(mut records: Vec<Record>, bad: Vec<PathBuf>) -> Result<DatasetIndex> {
    if !bad.is_empty() {
        return Err(Error::Ingestion { paths: bad });
    }
    records.sort_by(|a, b| {
        (a.subject, a.condition, a.run, a.view).cmp(&(b.subject, b.condition, b.run, b.view))
    });
    Ok(DatasetIndex { records })
}

/// Indexes a CASIA-B style tree under the CASIA-B protocol.
pub fn load_casia_layout(root: &Path) -> Result<DatasetIndex> {
    load_casia_layout_with(root, &Protocol::CasiaB)
}

pub fn load_casia_layout_with(root: &Path, protocol: &Protocol) -> Result<DatasetIndex> {
    let mut bad = Vec::new();
    let mut records = Vec::new();
    for (subject, sdir) in subject_dirs(root, &mut bad)? {
        for cdir in visible_entries(&sdir)? {
            let parsed = cdir.is_dir().then(|| {
                let (c, r) = name_of(&cdir).split_once('-')?;
                Some((c.parse::<Condition>().ok()?, parse_number(r)?))
            });
            let Some(Some((condition, run))) = parsed else {
                bad.push(cdir);
                continue;
            };
            for vdir in visible_entries(&cdir)? {
                let view = vdir
                    .is_dir()
                    .then(|| parse_number(name_of(&vdir)))
                    .flatten();
                let Some(view) = view else {
                    bad.push(vdir);
                    continue;
                };
                let frames = frames_in(&vdir, &mut bad)?;
                records.push(Record {
                    subject,
                    condition,
                    run,
                    view,
                    dir: vdir,
                    frames,
                    split: protocol.split(subject, condition, run),
                });
            }
        }
    }
    finish(records, bad)
}

/// Indexes an OU-MVLP style tree (`subject/view_run/frames`).
pub fn load_oumvlp_layout(root: &Path, train_subjects: u32) -> Result<DatasetIndex> {
    let protocol = Protocol::OuMvlp { train_subjects };
    let mut bad = Vec::new();
    let mut records = Vec::new();
    for (subject, sdir) in subject_dirs(root, &mut bad)? {
        for vdir in visible_entries(&sdir)? {
            let parsed = vdir.is_dir().then(|| {
                let (v, r) = name_of(&vdir).split_once('_')?;
                Some((parse_number(v)?, parse_number(r)?))
            });
            let Some(Some((view, run))) = parsed else {
                bad.push(vdir);
                continue;
            };
            let frames = frames_in(&vdir, &mut bad)?;
            records.push(Record {
                subject,
                condition: Condition::Nm,
                run,
                view,
                dir: vdir,
                frames,
                split: protocol.split(subject, Condition::Nm, run),
            });
        }
    }
    finish(records, bad)
}
