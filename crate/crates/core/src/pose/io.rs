//! Pose sequence files.
//!
//! Text layout:
//!
//! ```text
//! GESTUREPOSE 1
//! fps 30
//! frames 2
//! channels jaw:3 body:63 hand:90
//! style s0              (optional)
//! speaker spk0          (optional)
//! block expression:100  (optional, repeatable)
//! data
//! <frames lines of main values>
//! <frames lines per block, in declaration order>
//! ```
//!
//! The binary variant starts with `GPOSEBIN`, a little-endian u32 version,
//! a u32 length and a JSON header with the same fields, then the main matrix
//! and each block as little-endian f64.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExtraBlock, GestureSequence, SequenceMeta, BODY_DIM, HAND_DIM, JAW_DIM, POSE_DIM};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const TEXT_MAGIC: &str = "GESTUREPOSE";
pub const BINARY_MAGIC: &[u8; 8] = b"GPOSEBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseFormat {
    Text,
    Binary,
    /// Sniff the magic bytes on load; pick by extension (`.poseb`/`.bin`) on save.
    Auto,
}

impl std::str::FromStr for PoseFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "binary" => Ok(Self::Binary),
            "auto" => Ok(Self::Auto),
            other => Err(Error::invalid(format!("unknown pose format '{other}'"))),
        }
    }
}

/// Generic frame-matrix container; the pose file is the special case with
/// channels jaw/body/hand, embeddings use a single 256-wide channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub fps: f64,
    pub channels: Vec<(String, usize)>,
    /// Row-major `frames × width`.
    pub data: Vec<f64>,
    pub meta: SequenceMeta,
    pub blocks: Vec<ExtraBlock>,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    fps: f64,
    frames: usize,
    channels: Vec<(String, usize)>,
    style: Option<String>,
    speaker: Option<String>,
    blocks: Vec<(String, usize)>,
}

impl FrameFile {
    pub fn width(&self) -> usize {
        self.channels.iter().map(|c| c.1).sum()
    }

    pub fn frames(&self) -> usize {
        match self.width() {
            0 => 0,
            w => self.data.len() / w,
        }
    }

    pub fn from_sequence(seq: &GestureSequence) -> Self {
        Self {
            fps: seq.fps(),
            channels: pose_channels(),
            data: seq.data().to_vec(),
            meta: seq.meta.clone(),
            blocks: seq.extras.clone(),
        }
    }

    /// Wraps an `N×W` matrix as a single-channel file.
    pub fn from_matrix(name: &str, m: &Tensor, fps: f64) -> Self {
        Self {
            fps,
            channels: vec![(name.to_string(), m.cols())],
            data: m.data().to_vec(),
            meta: SequenceMeta::default(),
            blocks: Vec::new(),
        }
    }

    pub fn to_matrix(&self) -> Result<Tensor> {
        Tensor::new(vec![self.frames(), self.width()], self.data.clone())
    }

    pub fn into_sequence(self, path: &Path) -> Result<GestureSequence> {
        let width = self.width();
        if width != POSE_DIM {
            return Err(Error::format(path, format!("frame width {width} != {POSE_DIM}")));
        }
        if self.channels != pose_channels() {
            return Err(Error::format(path, format!("unexpected channel layout {:?}", self.channels)));
        }
        let mut seq = GestureSequence::new(self.data, self.fps).map_err(|e| Error::format(path, e.to_string()))?;
        seq.meta = self.meta;
        seq.extras = self.blocks;
        Ok(seq)
    }

    pub fn save(&self, path: &Path, format: PoseFormat) -> Result<()> {
        let binary = match format {
            PoseFormat::Binary => true,
            PoseFormat::Text => false,
            PoseFormat::Auto => is_binary_extension(path),
        };
        let bytes = if binary { self.to_binary() } else { self.to_text().into_bytes() };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, format: PoseFormat) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let binary = match format {
            PoseFormat::Binary => true,
            PoseFormat::Text => false,
            PoseFormat::Auto => bytes.starts_with(BINARY_MAGIC),
        };
        if binary {
            Self::from_binary(&bytes, path)
        } else {
            Self::from_text(&bytes, path)
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{TEXT_MAGIC} {FORMAT_VERSION}\n"));
        out.push_str(&format!("fps {:?}\n", self.fps));
        out.push_str(&format!("frames {}\n", self.frames()));
        let ch: Vec<String> = self.channels.iter().map(|(n, w)| format!("{n}:{w}")).collect();
        out.push_str(&format!("channels {}\n", ch.join(" ")));
        if let Some(s) = &self.meta.style {
            out.push_str(&format!("style {s}\n"));
        }
        if let Some(s) = &self.meta.speaker {
            out.push_str(&format!("speaker {s}\n"));
        }
        for b in &self.blocks {
            out.push_str(&format!("block {}:{}\n", b.name, b.width));
        }
        out.push_str("data\n");
        write_rows(&mut out, &self.data, self.width());
        for b in &self.blocks {
            write_rows(&mut out, &b.data, b.width);
        }
        out
    }

    fn from_text(bytes: &[u8], path: &Path) -> Result<Self> {
        let reader = BufReader::new(bytes);
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::format(path, format!("line {}: {e}", i + 1))),
                None => Err(Error::format(path, format!("unexpected end of file, expected {what}"))),
            }
        };
        let (_, magic) = next("header")?;
        let mut parts = magic.split_whitespace();
        if parts.next() != Some(TEXT_MAGIC) {
            return Err(Error::format(path, "malformed header: missing GESTUREPOSE magic"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed header: missing version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let mut fps = None;
        let mut frames = None;
        let mut channels = None;
        let mut meta = SequenceMeta::default();
        let mut block_decls = Vec::new();
        loop {
            let (ln, line) = next("'data'")?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "data" {
                break;
            }
            let (key, value) = line
                .split_once(char::is_whitespace)
                .map(|(k, v)| (k, v.trim()))
                .ok_or_else(|| Error::format(path, format!("malformed header line {ln}: '{line}'")))?;
            let bad = |what: &str| Error::format(path, format!("malformed header line {ln}: bad {what} '{value}'"));
            match key {
                "fps" => fps = Some(value.parse::<f64>().map_err(|_| bad("fps"))?),
                "frames" => frames = Some(value.parse::<usize>().map_err(|_| bad("frame count"))?),
                "channels" => {
                    channels = Some(
                        value
                            .split_whitespace()
                            .map(|c| parse_channel(c).ok_or_else(|| bad("channel")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "style" => meta.style = Some(value.to_string()),
                "speaker" => meta.speaker = Some(value.to_string()),
                "block" => block_decls.push(parse_channel(value).ok_or_else(|| bad("block"))?),
                _ => return Err(Error::format(path, format!("malformed header line {ln}: unknown key '{key}'"))),
            }
        }
        let fps = fps.ok_or_else(|| Error::format(path, "malformed header: missing fps"))?;
        let frames = frames.ok_or_else(|| Error::format(path, "malformed header: missing frames"))?;
        let channels = channels.ok_or_else(|| Error::format(path, "malformed header: missing channels"))?;
        let width: usize = channels.iter().map(|c| c.1).sum();
        let mut read_rows = |w: usize, label: &str| -> Result<Vec<f64>> {
            let mut data = Vec::with_capacity(frames * w);
            for row in 0..frames {
                let (ln, line) = next(&format!("{label} row {row}"))?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::format(path, format!("line {ln}: bad number '{tok}'")))?;
                    if !v.is_finite() {
                        return Err(Error::format(path, format!("line {ln}: non-finite value")));
                    }
                    data.push(v);
                }
                let got = data.len() - before;
                if got != w {
                    return Err(Error::format(
                        path,
                        format!("line {ln}: frame width {got} != declared {label} width {w}"),
                    ));
                }
            }
            Ok(data)
        };
        let data = read_rows(width, "frame")?;
        let mut blocks = Vec::new();
        for (name, w) in block_decls {
            let d = read_rows(w, &name)?;
            blocks.push(ExtraBlock { name, width: w, data: d });
        }
        Ok(Self {
            fps,
            channels,
            data,
            meta,
            blocks,
        })
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let header = BinaryHeader {
            fps: self.fps,
            frames: self.frames(),
            channels: self.channels.clone(),
            style: self.meta.style.clone(),
            speaker: self.meta.speaker.clone(),
            blocks: self.blocks.iter().map(|b| (b.name.clone(), b.width)).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.data.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.data.iter().chain(self.blocks.iter().flat_map(|b| b.data.iter())) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "malformed header: truncated magic"))?;
        if &magic != BINARY_MAGIC {
            return Err(Error::format(path, "malformed header: missing GPOSEBIN magic"));
        }
        let version = read_u32(&mut r, path)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r, path)? as usize;
        if r.len() < len {
            return Err(Error::format(path, "malformed header: truncated"));
        }
        let header: BinaryHeader = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
        r = &r[len..];
        let width: usize = header.channels.iter().map(|c| c.1).sum();
        let block_width: usize = header.blocks.iter().map(|b| b.1).sum();
        let expected = header.frames * (width + block_width) * 8;
        if r.len() != expected {
            return Err(Error::format(
                path,
                format!("payload has {} bytes, header implies {expected}", r.len()),
            ));
        }
        let mut values = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(n).collect();
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::format(path, format!("non-finite value at element {i}")));
            }
            Ok(v)
        };
        let data = take(header.frames * width)?;
        let mut blocks = Vec::new();
        for (name, w) in header.blocks {
            let d = take(header.frames * w)?;
            blocks.push(ExtraBlock { name, width: w, data: d });
        }
        Ok(Self {
            fps: header.fps,
            channels: header.channels,
            data,
            meta: SequenceMeta {
                style: header.style,
                speaker: header.speaker,
            },
            blocks,
        })
    }
}

fn pose_channels() -> Vec<(String, usize)> {
    vec![
        ("jaw".to_string(), JAW_DIM),
        ("body".to_string(), BODY_DIM),
        ("hand".to_string(), HAND_DIM),
    ]
}

fn parse_channel(s: &str) -> Option<(String, usize)> {
    let (name, w) = s.split_once(':')?;
    let w = w.parse().ok()?;
    (!name.is_empty() && w > 0).then(|| (name.to_string(), w))
}

fn write_rows(out: &mut String, data: &[f64], width: usize) {
    for row in data.chunks(width) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            // Debug formatting is the shortest representation that parses back exactly.
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
}

fn read_u32(r: &mut &[u8], path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(path, "malformed header: truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn is_binary_extension(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("poseb" | "bin"))
}

pub fn load_sequence(path: &Path, format: PoseFormat) -> Result<GestureSequence> {
    FrameFile::load(path, format)?.into_sequence(path)
}

pub fn save_sequence(seq: &GestureSequence, path: &Path, format: PoseFormat) -> Result<()> {
    FrameFile::from_sequence(seq).save(path, format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(n: usize) -> GestureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data = (0..n * POSE_DIM).map(|_| rng.random_range(-6.0..6.0)).collect();
        GestureSequence::new(data, 30.0).unwrap()
    }

    #[test]
    fn zeros_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pose");
        let seq = GestureSequence::zeros(10, 30.0).unwrap();
        save_sequence(&seq, &p, PoseFormat::Text).unwrap();
        let back = load_sequence(&p, PoseFormat::Auto).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.fps(), 30.0);
        assert!(back.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn roundtrip_is_bit_exact_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = random_seq(88);
        seq.meta.style = Some("s3".into());
        seq.meta.speaker = Some("spk1".into());
        seq.extras.push(ExtraBlock {
            name: "camera".into(),
            width: 3,
            data: (0..88 * 3).map(|i| i as f64 / 7.0).collect(),
        });
        for (name, fmt) in [("a.pose", PoseFormat::Text), ("a.poseb", PoseFormat::Binary)] {
            let p = dir.path().join(name);
            save_sequence(&seq, &p, fmt).unwrap();
            let back = load_sequence(&p, PoseFormat::Auto).unwrap();
            assert_eq!(back, seq, "{name}");
            let bits = |s: &GestureSequence| s.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&seq));
        }
    }

    #[test]
    fn width_155_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pose");
        let row = vec!["0"; 155].join(" ");
        let text = format!("GESTUREPOSE 1\nfps 30\nframes 1\nchannels jaw:3 body:63 hand:90\ndata\n{row}\n");
        fs::write(&p, text).unwrap();
        let err = load_sequence(&p, PoseFormat::Text).unwrap_err().to_string();
        assert!(err.contains("frame width 155"), "{err}");
        // declaring the narrow width is caught by the sequence check instead
        let text = format!("GESTUREPOSE 1\nfps 30\nframes 1\nchannels pose:155\ndata\n{row}\n");
        fs::write(&p, text).unwrap();
        let err = load_sequence(&p, PoseFormat::Text).unwrap_err().to_string();
        assert!(err.contains("frame width 155"), "{err}");
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_sequence(&dir.path().join("missing.pose"), PoseFormat::Auto),
            Err(Error::Io { .. })
        ));
        let p = dir.path().join("x.pose");
        fs::write(&p, "HELLO 1\n").unwrap();
        assert!(load_sequence(&p, PoseFormat::Auto).unwrap_err().to_string().contains("malformed header"));
        let row = vec!["0"; 156].join(" ").replacen('0', "NaN", 1);
        fs::write(
            &p,
            format!("GESTUREPOSE 1\nfps 30\nframes 1\nchannels jaw:3 body:63 hand:90\ndata\n{row}\n"),
        )
        .unwrap();
        assert!(load_sequence(&p, PoseFormat::Auto).unwrap_err().to_string().contains("non-finite"));
    }

    #[test]
    fn generic_width_container() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        let m = Tensor::new(vec![5, 256], (0..1280).map(|i| i as f64 * 0.5).collect()).unwrap();
        FrameFile::from_matrix("embedding", &m, 7.5).save(&p, PoseFormat::Auto).unwrap();
        let f = FrameFile::load(&p, PoseFormat::Auto).unwrap();
        assert_eq!(f.to_matrix().unwrap(), m);
        assert!(f.into_sequence(&p).is_err());
    }
}
