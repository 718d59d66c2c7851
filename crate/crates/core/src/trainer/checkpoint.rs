//! Checkpoint container: the embedding-file header with dtype 2, followed by
//! the run counters, config hash, parameters, AdamW moments, and the negative
//! sets currently in force. No timestamps are stored, so identical runs
//! produce identical bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::miner::{HardNegativeSet, SetOrigin, Strategy};
use crate::scorer::AdapterParams;
use crate::store::{ContainerHeader, DTYPE_CHECKPOINT, HEADER_LEN};

use super::optim::OptimizerState;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub optimizer: OptimizerState,
    /// Number of completed epochs; training resumes at this epoch.
    pub epoch: u64,
    /// Root seed. Every random stream is derived from it and the epoch, so
    /// together with `epoch` it fully determines the generator state.
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub negative_sets: Vec<HardNegativeSet>,
}

const STRATEGIES: [Strategy; 4] = Strategy::ALL;
const ORIGINS: [SetOrigin; 4] = [
    SetOrigin::WarmUp,
    SetOrigin::Defined,
    SetOrigin::BelowTargetFallback,
    SetOrigin::CorpusFallback,
];

fn code_of<T: PartialEq>(table: &[T], v: &T) -> u8 {
    table.iter().position(|x| x == v).expect("value listed in code table") as u8
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let header = ContainerHeader {
            dtype: DTYPE_CHECKPOINT,
            dim: p.d_in as u32,
            count: p.d_out as u64,
        };
        let mut out = header.encode().to_vec();
        for v in [self.epoch, self.optimizer.step, self.seed] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config_hash);
        for block in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for x in block.to_flat() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.negative_sets.len() as u64).to_le_bytes());
        for s in &self.negative_sets {
            let id = s.query_id.as_bytes();
            let len = u16::try_from(id.len())
                .map_err(|_| Error::Validation(format!("query id longer than {} bytes", u16::MAX)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(id);
            out.push(code_of(&STRATEGIES, &s.strategy));
            out.push(code_of(&ORIGINS, &s.origin));
            out.extend_from_slice(&(s.epoch_defined as u64).to_le_bytes());
            match &s.rank_span {
                Some(r) => {
                    out.push(1);
                    out.extend_from_slice(&(r.start as u64).to_le_bytes());
                    out.extend_from_slice(&(r.end as u64).to_le_bytes());
                }
                None => out.push(0),
            }
            out.extend_from_slice(&(s.negatives.len() as u64).to_le_bytes());
            for &row in &s.negatives {
                out.extend_from_slice(&(row as u32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = ContainerHeader::decode(bytes)?;
        if header.dtype != DTYPE_CHECKPOINT {
            return Err(Error::Format(format!(
                "expected checkpoint dtype {DTYPE_CHECKPOINT}, found {}",
                header.dtype
            )));
        }
        let (d_in, d_out) = (header.dim as usize, header.count as usize);
        let mut r = Reader { buf: &bytes[HEADER_LEN..] };
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n_params = AdapterParams::zeros(d_in, d_out).n_params();
        let mut flat = || -> Result<AdapterParams> {
            let v: Vec<f64> = (0..n_params).map(|_| r.f64()).collect::<Result<_>>()?;
            AdapterParams::from_flat(d_in, d_out, &v)
        };
        let params = flat()?;
        let m = flat()?;
        let v = flat()?;
        let n_sets = r.u64()? as usize;
        let mut negative_sets = Vec::with_capacity(n_sets.min(1 << 20));
        for _ in 0..n_sets {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let query_id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corruption("query id is not valid UTF-8".into()))?
                .to_owned();
            let strategy = *STRATEGIES
                .get(r.u8()? as usize)
                .ok_or_else(|| Error::Corruption("unknown strategy code".into()))?;
            let origin = *ORIGINS
                .get(r.u8()? as usize)
                .ok_or_else(|| Error::Corruption("unknown set origin code".into()))?;
            let epoch_defined = r.u64()? as usize;
            let rank_span = match r.u8()? {
                0 => None,
                1 => Some(r.u64()? as usize..r.u64()? as usize),
                _ => return Err(Error::Corruption("bad rank span flag".into())),
            };
            let n = r.u64()? as usize;
            let negatives = (0..n).map(|_| r.u32().map(|x| x as usize)).collect::<Result<_>>()?;
            negative_sets.push(HardNegativeSet {
                query_id,
                negatives,
                strategy,
                origin,
                epoch_defined,
                rank_span,
            });
        }
        if !r.buf.is_empty() {
            return Err(Error::Corruption(format!("{} trailing bytes after checkpoint", r.buf.len())));
        }
        Ok(Self {
            params,
            optimizer: OptimizerState { m, v, step },
            epoch,
            seed,
            config_hash,
            negative_sets,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.context(path.display().to_string()))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Corruption("checkpoint payload truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
