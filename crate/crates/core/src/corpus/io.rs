//! Manifest (line-delimited JSON records) and feature archive (little-endian f32) files.
//!
//! Archive layout: 8-byte magic, `u32` version, `u32` mel_bins, `f32` frame_rate,
//! then one block per utterance of `frames × (2 + mel_bins)` floats laid out as
//! `[pitch, energy, mel_0 .. mel_{B-1}]` per frame. Manifest records point at
//! their block by byte offset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Book, CorpusManifest, FeatureConfig, PhonemeInfo, SpeakerPitchStats, Utterance};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "ctxtts.corpus.v1";
pub const FEATURE_MAGIC: &[u8; 8] = b"CTXFEAT\0";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_BYTES: u64 = 8 + 4 + 4 + 4;

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema: String,
    mel_bins: usize,
    frame_rate: f32,
    phonemes: Vec<PhonemeInfo>,
    speakers: Vec<String>,
    features: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    book_id: String,
    speaker_id: String,
    index: usize,
    text: String,
    phonemes: Vec<String>,
    durations: Vec<usize>,
    offset: u64,
    frames: usize,
}

/// Writer/reader for feature blocks.
pub struct FeatureArchive;

impl FeatureArchive {
    pub fn write_header(w: &mut impl Write, mel_bins: usize, frame_rate: f32) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(mel_bins as u32).to_le_bytes())?;
        w.write_all(&frame_rate.to_le_bytes())?;
        Ok(())
    }

    pub fn write_block(w: &mut impl Write, pitch: &[f32], energy: &[f32], mel: &Array2<f32>) -> Result<u64> {
        let mut bytes = 0u64;
        for (t, row) in mel.rows().into_iter().enumerate() {
            w.write_all(&pitch[t].to_le_bytes())?;
            w.write_all(&energy[t].to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
            bytes += 4 * (2 + row.len()) as u64;
        }
        Ok(bytes)
    }

    /// Returns `(mel_bins, frame_rate, body)`.
    pub fn read(path: &Path) -> Result<(usize, f32, Vec<u8>)> {
        let mut buf = Vec::new();
        File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < FEATURE_HEADER_BYTES as usize || &buf[..8] != FEATURE_MAGIC {
            return Err(Error::Format(format!("{}: not a feature archive", path.display())));
        }
        let word = |i: usize| [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]];
        let version = u32::from_le_bytes(word(8));
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("{}: unsupported archive version {version}", path.display())));
        }
        let mel_bins = u32::from_le_bytes(word(12)) as usize;
        let frame_rate = f32::from_le_bytes(word(16));
        Ok((mel_bins, frame_rate, buf))
    }

    pub fn block(buf: &[u8], offset: u64, frames: usize, mel_bins: usize) -> Result<(Vec<f32>, Vec<f32>, Array2<f32>)> {
        let width = 2 + mel_bins;
        let start = offset as usize;
        let end = start + 4 * width * frames;
        if start < FEATURE_HEADER_BYTES as usize || end > buf.len() {
            return Err(Error::Format(format!("feature block {start}..{end} outside archive")));
        }
        let floats: Vec<f32> = buf[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut pitch = Vec::with_capacity(frames);
        let mut energy = Vec::with_capacity(frames);
        let mut mel = Array2::zeros((frames, mel_bins));
        for (t, frame) in floats.chunks_exact(width).enumerate() {
            pitch.push(frame[0]);
            energy.push(frame[1]);
            for (b, &v) in frame[2..].iter().enumerate() {
                mel[[t, b]] = v;
            }
        }
        Ok((pitch, energy, mel))
    }
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.manifest")), dir.join(format!("{stem}.features")))
}

/// Writes `<stem>.manifest` and `<stem>.features` into `dir`.
pub fn write_corpus(manifest: &CorpusManifest, dir: &Path, stem: &str) -> Result<()> {
    manifest.validate()?;
    let (mpath, fpath) = paths(dir, stem);
    let mut feat = BufWriter::new(File::create(&fpath)?);
    FeatureArchive::write_header(&mut feat, manifest.features.mel_bins, manifest.features.frame_rate)?;
    let mut out = BufWriter::new(File::create(&mpath)?);
    let header = ManifestHeader {
        schema: MANIFEST_SCHEMA.into(),
        mel_bins: manifest.features.mel_bins,
        frame_rate: manifest.features.frame_rate,
        phonemes: manifest.features.phonemes.clone(),
        speakers: manifest.speakers.clone(),
        features: format!("{stem}.features"),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut offset = FEATURE_HEADER_BYTES;
    for u in manifest.utterances() {
        let rec = ManifestRecord {
            book_id: u.book_id.clone(),
            speaker_id: u.speaker_id.clone(),
            index: u.index,
            text: u.text.clone(),
            phonemes: u.phonemes.clone(),
            durations: u.durations.clone(),
            offset,
            frames: u.frames(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        offset += FeatureArchive::write_block(&mut feat, &u.pitch, &u.energy, &u.mel)?;
    }
    feat.flush()?;
    out.flush()?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path, stem: &str) -> Result<CorpusManifest> {
    let (mpath, _) = paths(dir, stem);
    let reader = BufReader::new(File::open(&mpath)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty manifest", mpath.display())))??;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(Error::Format(format!("{}: schema `{}` is not {MANIFEST_SCHEMA}", mpath.display(), header.schema)));
    }
    let (mel_bins, frame_rate, buf) = FeatureArchive::read(&dir.join(&header.features))?;
    if mel_bins != header.mel_bins {
        return Err(Error::Format(format!("archive has {mel_bins} mel bins, manifest {}", header.mel_bins)));
    }
    let mut books: Vec<Book> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        let (pitch, energy, mel) = FeatureArchive::block(&buf, rec.offset, rec.frames, mel_bins)?;
        let utt = Utterance {
            book_id: rec.book_id.clone(),
            speaker_id: rec.speaker_id,
            index: rec.index,
            text: rec.text,
            phonemes: rec.phonemes,
            durations: rec.durations,
            pitch,
            energy,
            mel,
        };
        match books.last_mut() {
            Some(b) if b.id == rec.book_id => b.utterances.push(utt),
            _ => books.push(Book { id: rec.book_id, utterances: vec![utt] }),
        }
    }
    let manifest = CorpusManifest {
        features: FeatureConfig { mel_bins, frame_rate, phonemes: header.phonemes },
        speakers: header.speakers,
        books,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Tab-separated `speaker_id, mu, sigma, degenerate`.
pub fn write_speaker_stats(path: &Path, stats: &BTreeMap<String, SpeakerPitchStats>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "speaker_id\tmu\tsigma\tdegenerate")?;
    for s in stats.values() {
        writeln!(w, "{}\t{}\t{}\t{}", s.speaker_id, s.mu, s.sigma, s.degenerate)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_speaker_stats(path: &Path) -> Result<BTreeMap<String, SpeakerPitchStats>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!("{}: bad stats row `{line}`", path.display())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
        let stats = SpeakerPitchStats {
            speaker_id: cols[0].to_string(),
            mu: num(cols[1])?,
            sigma: num(cols[2])?,
            degenerate: cols[3] == "true",
        };
        out.insert(stats.speaker_id.clone(), stats);
    }
    Ok(out)
}
