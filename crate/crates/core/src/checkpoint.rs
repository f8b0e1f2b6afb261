//! Checkpoint files: a text header followed by raw little-endian `f32`
//! tensors, row-major.
//!
//! ```text
//! LAMPATCKPT 1
//! epoch <n>
//! final <true|false>
//! history <path|->
//! config <bytes>
//! <TOML>
//! vocab <bytes>
//! <vocab file>
//! tensor <name> <dim,dim> <offset> <count>
//! ...
//! end
//! <tensor data>
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::rng::component_rng;
use crate::tinylm::{Parameters, TensorMut, TensorRef};

pub const MAGIC: &str = "LAMPATCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: Parameters<f32>,
    pub adapters: AdapterSet<f32>,
    /// Epochs of adversarial training behind these adapters.
    pub epoch: usize,
    pub is_final: bool,
    pub history: Option<String>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedCheckpoint(msg.into())
}

fn all_tensors(c: &Checkpoint) -> Vec<TensorRef<'_, f32>> {
    let mut t = c.params.tensors();
    t.extend(c.adapters.tensors());
    t
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_toml();
        let vocab = self.vocab.to_file_string();
        let mut head = format!(
            "{MAGIC} {FORMAT_VERSION}\nepoch {}\nfinal {}\nhistory {}\nconfig {}\n{config}vocab {}\n{vocab}",
            self.epoch,
            self.is_final,
            self.history.as_deref().unwrap_or("-"),
            config.len(),
            vocab.len(),
        );
        let mut offset = 0;
        let tensors = all_tensors(self);
        for t in &tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            head += &format!("tensor {} {} {offset} {}\n", t.name, dims.join(","), t.data.len());
            offset += 4 * t.data.len();
        }
        head += "end\n";
        let mut out = head.into_bytes();
        out.reserve(offset);
        for t in &tensors {
            for v in t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let first = r.line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| malformed("not a checkpoint file"))?
            .parse::<u32>()
            .map_err(|_| malformed("bad format version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let epoch = r.field("epoch")?.parse().map_err(|_| malformed("bad epoch"))?;
        let is_final = r.field("final")?.parse().map_err(|_| malformed("bad final flag"))?;
        let history = Some(r.field("history")?).filter(|h| h != "-");
        let config = RunConfig::from_toml(&r.block("config")?)?;
        let vocab = Vocab::from_file_str(&r.block("vocab")?)?;

        let mut directory = Vec::new();
        loop {
            let line = r.line()?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let ["tensor", name, dims, offset, count] = parts[..] else {
                return Err(malformed(format!("bad tensor line `{line}`")));
            };
            let shape = dims
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| malformed(format!("bad shape for {name}")))?;
            let offset: usize = offset.parse().map_err(|_| malformed("bad offset"))?;
            let count: usize = count.parse().map_err(|_| malformed("bad count"))?;
            directory.push((name.to_string(), shape, offset, count));
        }
        let data = &bytes[r.pos..];

        let mut params = Parameters::<f32>::zeros(config.model)?;
        let mut adapters = AdapterSet::<f32>::new(&config.model, &config.lora, &mut component_rng(0, "checkpoint"))?;
        let mut targets: Vec<TensorMut<'_, f32>> = params.tensors_mut();
        targets.extend(adapters.tensors_mut());
        if targets.len() != directory.len() {
            return Err(malformed(format!(
                "expected {} tensors, found {}",
                targets.len(),
                directory.len()
            )));
        }
        for (t, (name, shape, offset, count)) in targets.iter_mut().zip(&directory) {
            if &t.name != name || &t.shape != shape || t.data.len() != *count {
                return Err(malformed(format!("tensor {name} does not match the configured model")));
            }
            let raw = data
                .get(*offset..offset + 4 * count)
                .ok_or_else(|| malformed(format!("tensor {name} is truncated")))?;
            for (v, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        drop(targets);
        Ok(Checkpoint {
            config,
            vocab,
            params,
            adapters,
            epoch,
            is_final,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn line(&mut self) -> Result<String> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| malformed("header ends early"))?;
        self.pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| malformed("header is not UTF-8"))
    }

    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| malformed(format!("expected `{key}`, found `{line}`")))
    }

    fn block(&mut self, key: &str) -> Result<String> {
        let len: usize = self.field(key)?.parse().map_err(|_| malformed(format!("bad {key} length")))?;
        let raw = self
            .bytes
            .get(self.pos..self.pos + len)
            .ok_or_else(|| malformed(format!("{key} block is truncated")))?;
        self.pos += len;
        String::from_utf8(raw.to_vec()).map_err(|_| malformed(format!("{key} block is not UTF-8")))
    }
}

/// Exclusive claim on a checkpoint directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
