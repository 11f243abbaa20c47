//! Versioned binary checkpoints. Layout: magic "MXDP1", a format version
//! byte, session bookkeeping, then per-network blocks (layer count, widths,
//! row-major weights and biases as little-endian f64, a version counter)
//! each followed by its Adam state where one exists. Round-trips are
//! bit-exact and every write is temp-then-rename atomic.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::net::{AdamState, Mlp};
use crate::policy::{MlpPolicy, NoisePredictor};
use crate::sac::{CriticPair, SessionKind, SessionState, Transition};

const MAGIC: &[u8; 5] = b"MXDP1";
const FORMAT_VERSION: u8 = 1;

pub fn save_session(path: &Path, state: &SessionState) -> Result<()> {
    let bytes = encode_session(state);
    write_atomic(path, &bytes)
}

pub fn load_session(path: &Path) -> Result<SessionState> {
    let bytes = fs::read(path)?;
    decode_session(&bytes)
}

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::Builder::new()
        .prefix(".ckpt")
        .tempfile_in(dir.unwrap_or_else(|| Path::new(".")))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_session(state: &SessionState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(match state.kind {
        SessionKind::MultiGoal => 0,
        SessionKind::MixtureStatic => 1,
    });
    put_u64(&mut out, state.seed);
    put_u64(&mut out, state.step);
    put_u64(&mut out, state.update_counter);
    put_u64(&mut out, state.eval_counter);
    put_f64(&mut out, state.episode_return);
    put_u64(&mut out, state.episode_len);
    match state.last_episode_return {
        Some(v) => {
            out.push(1);
            put_f64(&mut out, v);
        }
        None => out.push(0),
    }
    put_f64_slice(&mut out, &state.cur_state);
    put_f64_slice(&mut out, &state.env_snapshot);
    out.extend_from_slice(&state.env_rng_word_pos.to_le_bytes());

    put_u64(&mut out, state.policy.action_dim() as u64);
    put_u64(&mut out, state.policy.state_dim() as u64);
    put_net(&mut out, &state.policy.mlp);
    put_adam(&mut out, &state.policy_opt);

    match &state.critics {
        Some(c) => {
            out.push(1);
            put_u64(&mut out, c.state_dim() as u64);
            put_u64(&mut out, c.action_dim() as u64);
            put_net(&mut out, &c.q1);
            put_adam(&mut out, &c.opt1);
            put_net(&mut out, &c.q2);
            put_adam(&mut out, &c.opt2);
            put_net(&mut out, &c.q1_target);
            put_net(&mut out, &c.q2_target);
        }
        None => out.push(0),
    }

    put_u64(&mut out, state.buffer_capacity as u64);
    put_u64(&mut out, state.buffer_cursor as u64);
    put_u64(&mut out, state.buffer_items.len() as u64);
    for item in &state.buffer_items {
        put_f64_slice(&mut out, &item.s);
        put_f64_slice(&mut out, &item.a);
        put_f64(&mut out, item.r);
        put_f64_slice(&mut out, &item.s_next);
        out.push(item.done as u8);
    }
    out
}

pub fn decode_session(bytes: &[u8]) -> Result<SessionState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = match r.u8()? {
        0 => SessionKind::MultiGoal,
        1 => SessionKind::MixtureStatic,
        k => return Err(Error::Checkpoint(format!("unknown session kind {k}"))),
    };
    let seed = r.u64()?;
    let step = r.u64()?;
    let update_counter = r.u64()?;
    let eval_counter = r.u64()?;
    let episode_return = r.f64()?;
    let episode_len = r.u64()?;
    let last_episode_return = match r.u8()? {
        0 => None,
        1 => Some(r.f64()?),
        f => return Err(Error::Checkpoint(format!("bad option flag {f}"))),
    };
    let cur_state = r.f64_vec()?;
    let env_snapshot = r.f64_vec()?;
    let env_rng_word_pos = u128::from_le_bytes(
        r.take(16)?.try_into().expect("take(16) returned 16 bytes"),
    );

    let action_dim = r.u64()? as usize;
    let state_dim = r.u64()? as usize;
    let mlp = r.net()?;
    let policy_opt = r.adam(&mlp)?;
    let policy = MlpPolicy::from_mlp(mlp, action_dim, state_dim);

    let critics = match r.u8()? {
        0 => None,
        1 => {
            let sd = r.u64()? as usize;
            let ad = r.u64()? as usize;
            let q1 = r.net()?;
            let opt1 = r.adam(&q1)?;
            let q2 = r.net()?;
            let opt2 = r.adam(&q2)?;
            let q1_target = r.net()?;
            let q2_target = r.net()?;
            Some(CriticPair::from_parts(q1, q2, q1_target, q2_target, opt1, opt2, sd, ad)?)
        }
        f => return Err(Error::Checkpoint(format!("bad critics flag {f}"))),
    };

    let buffer_capacity = r.u64()? as usize;
    let buffer_cursor = r.u64()? as usize;
    let n_items = r.u64()? as usize;
    if n_items > buffer_capacity {
        return Err(Error::Checkpoint("replay buffer overflows its capacity".into()));
    }
    let mut buffer_items = Vec::with_capacity(n_items.min(1 << 20));
    for _ in 0..n_items {
        let s = r.f64_vec()?;
        let a = r.f64_vec()?;
        let rew = r.f64()?;
        let s_next = r.f64_vec()?;
        let done = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("bad done flag {f}"))),
        };
        buffer_items.push(Transition { s, a, r: rew, s_next, done });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the session payload",
            bytes.len() - r.pos
        )));
    }
    Ok(SessionState {
        kind,
        seed,
        step,
        update_counter,
        eval_counter,
        episode_return,
        episode_len,
        last_episode_return,
        cur_state,
        env_snapshot,
        env_rng_word_pos,
        policy,
        policy_opt,
        critics,
        buffer_capacity,
        buffer_items,
        buffer_cursor,
    })
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64_slice(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for &x in v {
        put_f64(out, x);
    }
}

fn put_net(out: &mut Vec<u8>, net: &Mlp) {
    let widths = net.widths();
    put_u64(out, widths.len() as u64);
    for &w in widths {
        put_u64(out, w as u64);
    }
    for l in 0..widths.len() - 1 {
        for &x in net.w[l].iter() {
            put_f64(out, x);
        }
        for &x in net.b[l].iter() {
            put_f64(out, x);
        }
    }
    put_u64(out, net.version());
}

fn put_adam(out: &mut Vec<u8>, opt: &AdamState) {
    put_f64(out, opt.lr);
    put_f64(out, opt.beta1);
    put_f64(out, opt.beta2);
    put_f64(out, opt.eps);
    put_u64(out, opt.step);
    for l in 0..opt.m_w.len() {
        for &x in opt.m_w[l].iter() {
            put_f64(out, x);
        }
        for &x in opt.v_w[l].iter() {
            put_f64(out, x);
        }
        for &x in opt.m_b[l].iter() {
            put_f64(out, x);
        }
        for &x in opt.v_b[l].iter() {
            put_f64(out, x);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.remaining() / 8 {
            return Err(Error::Checkpoint("vector length exceeds the file".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn net(&mut self) -> Result<Mlp> {
        let n_widths = self.u64()? as usize;
        if n_widths < 2 || n_widths > self.remaining() / 8 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_widths}")));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(self.u64()? as usize);
        }
        let mut net = Mlp::zeros(&widths)
            .map_err(|e| Error::Checkpoint(format!("bad network widths: {e}")))?;
        for l in 0..n_widths - 1 {
            let (rows, cols) = (widths[l + 1], widths[l]);
            if rows.checked_mul(cols).map_or(true, |n| n > self.remaining() / 8) {
                return Err(Error::Checkpoint("truncated weight matrix".into()));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(self.f64()?);
            }
            net.w[l] = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let mut bias = Vec::with_capacity(rows);
            for _ in 0..rows {
                bias.push(self.f64()?);
            }
            net.b[l] = Array1::from_vec(bias);
        }
        net.set_version(self.u64()?);
        Ok(net)
    }

    fn adam(&mut self, net: &Mlp) -> Result<AdamState> {
        let lr = self.f64()?;
        let mut opt = AdamState::new(net, lr);
        opt.beta1 = self.f64()?;
        opt.beta2 = self.f64()?;
        opt.eps = self.f64()?;
        opt.step = self.u64()?;
        for l in 0..opt.m_w.len() {
            for slot in [&mut opt.m_w, &mut opt.v_w] {
                for x in slot[l].iter_mut() {
                    *x = self.f64()?;
                }
            }
            for slot in [&mut opt.m_b, &mut opt.v_b] {
                for x in slot[l].iter_mut() {
                    *x = self.f64()?;
                }
            }
        }
        Ok(opt)
    }
}
