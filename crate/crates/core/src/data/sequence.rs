//! Aligned frame storage and image IO.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use log::warn;

use super::align::align_bits;
use rayon::prelude::*;

use super::layout::{frames_in, Condition, Record, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An aligned silhouette sequence stored compactly as `{0, 1}` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSequence {
    pub height: usize,
    pub width: usize,
    bits: Vec<u8>,
    /// Frames dropped because they held no foreground.
    pub dropped: usize,
}

impl AlignedSequence {
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len() % (height * width), 0);
        AlignedSequence {
            height,
            width,
            bits,
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn frame_bits(&self, i: usize) -> &[u8] {
        let fl = self.height * self.width;
        &self.bits[i * fl..(i + 1) * fl]
    }

    /// Frames at `indices` as `[len, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let fl = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * fl);
        for &i in indices {
            data.extend(self.frame_bits(i).iter().map(|&b| f64::from(b)));
        }
        Tensor::new(vec![indices.len(), self.height, self.width], data).expect("consistent shape")
    }

    pub fn to_tensor(&self) -> Tensor {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes 8-bit PNG, or binary PGM (P5) for a `.pgm` extension.
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if !is_pgm {
        return img.save(path).map_err(|e| err(e.to_string()));
    }
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            ExtendedColorType::L8,
        )
        .map_err(|e| err(e.to_string()))
}

/// Reads and aligns every frame of `record`; blank frames are dropped and
/// counted.
pub fn load_sequence(record: &Record, height: usize, width: usize) -> Result<AlignedSequence> {
    let mut bits = Vec::with_capacity(record.frames.len() * height * width);
    let mut dropped = 0;
    for path in &record.frames {
        match align_bits(&read_gray(path)?, height, width) {
            Ok(b) => bits.extend(b),
            Err(Error::DegenerateFrame) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} blank frame(s)", record.label());
    }
    Ok(AlignedSequence {
        height,
        width,
        bits,
        dropped,
    })
}

/// Reads a single directory of frames (sorted by file name) as one sequence.
pub fn load_frame_dir(dir: &Path, height: usize, width: usize) -> Result<AlignedSequence> {
    let mut bad = Vec::new();
    let frames = frames_in(dir, &mut bad)?;
    if !bad.is_empty() {
        return Err(Error::Ingestion { paths: bad });
    }
    let record = Record {
        subject: 0,
        condition: Condition::Nm,
        run: 0,
        view: 0,
        dir: dir.to_path_buf(),
        frames,
        split: Split::Unused,
    };
    load_sequence(&record, height, width)
}

/// An aligned sequence with its protocol labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub subject: u32,
    pub condition: Condition,
    pub run: u32,
    pub view: u32,
    pub seq: AlignedSequence,
}

/// Loads and aligns every record, in parallel, keeping record order.
pub fn load_records<'a, I>(records: I, height: usize, width: usize) -> Result<Vec<LabeledSequence>>
where
    I: IntoIterator<Item = &'a Record>,
{
    let records: Vec<&Record> = records.into_iter().collect();
    records
        .par_iter()
        .map(|r| {
            Ok(LabeledSequence {
                subject: r.subject,
                condition: r.condition,
                run: r.run,
                view: r.view,
                seq: load_sequence(r, height, width)?,
            })
        })
        .collect()
}
