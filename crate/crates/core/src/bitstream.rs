//! Integer range coder, the GSSC container, and QP/lambda scheduling.

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CameraRig};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// Frequency table summing to [`PROB_TOTAL`], every entry at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pmf {
    freq: Vec<u32>,
    cum: Vec<u32>,
}

impl Pmf {
    pub fn new(freq: Vec<u32>) -> Result<Self> {
        if freq.is_empty() || freq.iter().any(|&f| f == 0) {
            return Err(Error::InvalidArgument("pmf entries must be positive".into()));
        }
        let mut cum = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for &f in &freq {
            acc += f as u64;
            cum.push(acc.min(u32::MAX as u64) as u32);
        }
        if acc != PROB_TOTAL as u64 {
            return Err(Error::InvalidArgument(format!("pmf sums to {acc}, expected {PROB_TOTAL}")));
        }
        Ok(Self { freq, cum })
    }

    /// Quantizes probabilities (summing to 1) with a floor of 1 per entry;
    /// the leftover mass goes to the most probable entry (first on ties).
    pub fn from_probs(probs: &[f64]) -> Self {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Self::from_probs_anchored(probs, best)
    }

    /// As [`Pmf::from_probs`] with the leftover mass assigned to `anchor`.
    pub fn from_probs_anchored(probs: &[f64], anchor: usize) -> Self {
        let n = probs.len() as u32;
        let budget = (PROB_TOTAL - n) as f64;
        let mut freq: Vec<u32> = probs.iter().map(|&p| 1 + (p.max(0.0) * budget).floor() as u32).collect();
        let sum: u64 = freq.iter().map(|&f| f as u64).sum();
        freq[anchor] += (PROB_TOTAL as u64 - sum) as u32;
        Self::new(freq).expect("quantized pmf is valid")
    }

    pub fn uniform(n: usize) -> Self {
        let base = PROB_TOTAL / n as u32;
        let mut freq = vec![base; n];
        freq[0] += PROB_TOTAL - base * n as u32;
        Self::new(freq).expect("uniform pmf is valid")
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn freq(&self, i: usize) -> u32 {
        self.freq[i]
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freq
    }

    /// Ideal code length of entry `i` in bits.
    pub fn bits(&self, i: usize) -> f64 {
        -((self.freq[i] as f64) / PROB_TOTAL as f64).log2()
    }

    fn find(&self, target: u32) -> usize {
        // Largest i with cum[i] <= target.
        let mut lo = 0;
        let mut hi = self.freq.len();
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// 32-bit range encoder; carries propagate into already emitted bytes.
#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, out: Vec::new() }
    }

    fn propagate_carry(&mut self) {
        for b in self.out.iter_mut().rev() {
            let (v, overflow) = b.overflowing_add(1);
            *b = v;
            if !overflow {
                return;
            }
        }
    }

    pub fn encode(&mut self, pmf: &Pmf, symbol: usize) {
        let r = self.range >> PROB_BITS;
        self.low += r as u64 * pmf.cum[symbol] as u64;
        self.range = r * pmf.freq[symbol];
        if self.low >> 32 != 0 {
            self.propagate_carry();
            self.low &= 0xFFFF_FFFF;
        }
        while self.range < TOP {
            self.out.push((self.low >> 24) as u8);
            self.low = (self.low << 8) & 0xFFFF_FFFF;
            self.range <<= 8;
        }
    }

    /// Flushes the four bytes of `low` and returns the payload.
    pub fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&(self.low as u32).to_be_bytes());
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Truncated(format!("range payload of {} bytes", data.len())));
        }
        let code = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
        Ok(Self { code, range: u32::MAX, data, pos: 4 })
    }

    pub fn decode(&mut self, pmf: &Pmf) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let target = (self.code / r).min(PROB_TOTAL - 1);
        let s = pmf.find(target);
        self.code -= r * pmf.cum[s];
        self.range = r * pmf.freq[s];
        while self.range < TOP {
            let byte = *self
                .data
                .get(self.pos)
                .ok_or_else(|| Error::Truncated(format!("range payload ended after {} bytes", self.data.len())))?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// True when every payload byte has been consumed.
    pub fn is_exhausted(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub fn range_encode(symbols: &[usize], pmfs: &[Pmf]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for (&s, p) in symbols.iter().zip(pmfs) {
        enc.encode(p, s);
    }
    enc.finish()
}

pub fn range_decode(bytes: &[u8], pmfs: &[Pmf]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes)?;
    pmfs.iter().map(|p| dec.decode(p)).collect()
}

// ----------------------------------------------------------------------
// QP machinery
// ----------------------------------------------------------------------

pub const QP_MAX: u8 = 63;
pub const LAMBDA_MAX: f64 = 750.0;
pub const QP_PRESETS: [u8; 6] = [7, 15, 23, 31, 39, 47];
pub const DEFAULT_PATTERN: [u8; 4] = [0, 8, 0, 4];

/// Log-linear map `750^(q / 63)` on the continuous QP axis.
pub fn lambda_of(q: f64) -> f64 {
    LAMBDA_MAX.powf(q / QP_MAX as f64)
}

pub fn qp_to_lambda(qp: u8) -> Result<f64> {
    if qp > QP_MAX {
        return Err(Error::InvalidArgument(format!("qp {qp} outside 0..=63")));
    }
    Ok(lambda_of(qp as f64))
}

/// Latent quantization step: `1 / sqrt(lambda)`, normalized to 1 at the middle QP.
pub fn qstep_of(q: f64) -> f64 {
    LAMBDA_MAX.powf((QP_MAX as f64 / 2.0 - q) / (2.0 * QP_MAX as f64))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QpSchedule {
    pub base_qp: u8,
    pub pattern: Vec<u8>,
}

impl QpSchedule {
    pub fn new(base_qp: u8, pattern: Vec<u8>) -> Result<Self> {
        if base_qp > QP_MAX {
            return Err(Error::InvalidArgument(format!("base qp {base_qp} outside 0..=63")));
        }
        if pattern.is_empty() || pattern.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument("qp pattern must have 1..=255 entries".into()));
        }
        Ok(Self { base_qp, pattern })
    }

    pub fn with_default_pattern(base_qp: u8) -> Result<Self> {
        Self::new(base_qp, DEFAULT_PATTERN.to_vec())
    }

    pub fn offset_index(&self, t: usize) -> usize {
        t % self.pattern.len()
    }

    pub fn effective_qp(&self, t: usize) -> u8 {
        (self.base_qp as u32 + self.pattern[self.offset_index(t)] as u32).min(QP_MAX as u32) as u8
    }
}

pub fn effective_qp(schedule: &QpSchedule, t: usize) -> u8 {
    schedule.effective_qp(t)
}

/// Parses `0,8,0,4`.
pub fn parse_pattern(s: &str) -> Result<Vec<u8>> {
    s.split(',')
        .map(|p| p.trim().parse::<u8>().map_err(|e| Error::InvalidArgument(format!("pattern entry `{p}`: {e}"))))
        .collect()
}

// ----------------------------------------------------------------------
// Container
// ----------------------------------------------------------------------

pub const MAGIC: &[u8; 4] = b"GSSC";
pub const VERSION: u8 = 1;
pub const PAYLOADS_PER_FRAME: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    I = 0,
    P = 1,
}

/// Index of a payload blob inside a frame.
pub fn payload_slot(view: usize, stream_image: bool, latent: bool) -> usize {
    view * 4 + if stream_image { 2 } else { 0 } + usize::from(latent)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePayload {
    pub frame_type: FrameType,
    pub qp_offset_index: u8,
    /// Per view `{disp_hyper, disp_latent, img_hyper, img_latent}`, left view first.
    pub payloads: [Vec<u8>; PAYLOADS_PER_FRAME],
}

impl FramePayload {
    pub fn payload_bytes(&self) -> usize {
        self.payloads.iter().map(Vec::len).sum()
    }
}

/// Camera parameters as carried on the wire (f32 precision).
#[derive(Clone, Debug, PartialEq)]
pub struct WireCamera {
    pub intrinsics: [f32; 4],
    pub extrinsics: [f32; 12],
}

impl WireCamera {
    pub fn from_model(c: &CameraModel) -> Self {
        let mut extrinsics = [0f32; 12];
        for (d, s) in extrinsics.iter_mut().zip(c.world_to_camera.iter()) {
            *d = *s as f32;
        }
        Self { intrinsics: [c.fx as f32, c.fy as f32, c.cx as f32, c.cy as f32], extrinsics }
    }

    pub fn to_model(&self, width: usize, height: usize) -> CameraModel {
        let i = self.intrinsics;
        let mut w2c = [0f64; 12];
        for (d, s) in w2c.iter_mut().zip(self.extrinsics.iter()) {
            *d = *s as f64;
        }
        CameraModel { fx: i[0] as f64, fy: i[1] as f64, cx: i[2] as f64, cy: i[3] as f64, width, height, world_to_camera: w2c }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub frame_count: u16,
    pub base_qp: u8,
    pub pattern: Vec<u8>,
    pub gop_len: u8,
    pub cameras: [WireCamera; 2],
    pub baseline: f32,
}

impl Header {
    pub fn schedule(&self) -> Result<QpSchedule> {
        QpSchedule::new(self.base_qp, self.pattern.clone())
    }

    /// Rectified rig reconstructed from the wire cameras (no targets).
    pub fn rig(&self) -> CameraRig {
        let (w, h) = (self.width as usize, self.height as usize);
        CameraRig {
            left: self.cameras[0].to_model(w, h),
            right: self.cameras[1].to_model(w, h),
            baseline: self.baseline as f64,
            targets: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 1 + 2 + 2 + 2 + 1 + 1 + self.pattern.len() + 1 + 2 * 16 * 4 + 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodedStream {
    pub header: Header,
    pub frames: Vec<FramePayload>,
}

/// Per-frame framing: type, offset index and eight length prefixes.
pub const FRAME_OVERHEAD: usize = 2 + PAYLOADS_PER_FRAME * 4;

pub fn write_container(stream: &CodedStream) -> Result<Vec<u8>> {
    let h = &stream.header;
    if stream.frames.len() != h.frame_count as usize {
        return Err(Error::InvalidArgument(format!(
            "header announces {} frames, {} supplied",
            h.frame_count,
            stream.frames.len()
        )));
    }
    if h.pattern.is_empty() || h.pattern.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument("qp pattern must have 1..=255 entries".into()));
    }
    let mut out = Vec::with_capacity(h.encoded_len() + stream.frames.iter().map(|f| FRAME_OVERHEAD + f.payload_bytes()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(h.flags);
    out.extend_from_slice(&h.width.to_le_bytes());
    out.extend_from_slice(&h.height.to_le_bytes());
    out.extend_from_slice(&h.frame_count.to_le_bytes());
    out.push(h.base_qp);
    out.push(h.pattern.len() as u8);
    out.extend_from_slice(&h.pattern);
    out.push(h.gop_len);
    for cam in &h.cameras {
        for v in cam.intrinsics.iter().chain(cam.extrinsics.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&h.baseline.to_le_bytes());
    for f in &stream.frames {
        out.push(f.frame_type as u8);
        out.push(f.qp_offset_index);
        for p in &f.payloads {
            let len = u32::try_from(p.len()).map_err(|_| Error::InvalidArgument("payload exceeds 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(p);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Corrupt(format!("{what} overruns the container ({} bytes left, {n} needed)", self.data.len() - self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<CodedStream> {
    let mut r = Reader { data: bytes, pos: 0 };
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a GSSC container (bad magic)".into()));
    }
    r.pos = 4;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let flags = r.u8("flags")?;
    let width = r.u16("width")?;
    let height = r.u16("height")?;
    let frame_count = r.u16("frame count")?;
    let base_qp = r.u8("base qp")?;
    if base_qp > QP_MAX {
        return Err(Error::Corrupt(format!("base qp {base_qp} out of range")));
    }
    let plen = r.u8("pattern length")? as usize;
    if plen == 0 {
        return Err(Error::Corrupt("empty qp pattern".into()));
    }
    let pattern = r.take(plen, "pattern")?.to_vec();
    let gop_len = r.u8("gop length")?;
    let mut cam = || -> Result<WireCamera> {
        let mut intrinsics = [0f32; 4];
        let mut extrinsics = [0f32; 12];
        for v in intrinsics.iter_mut().chain(extrinsics.iter_mut()) {
            *v = r.f32("camera block")?;
        }
        Ok(WireCamera { intrinsics, extrinsics })
    };
    let cameras = [cam()?, cam()?];
    let baseline = r.f32("baseline")?;
    let header = Header { flags, width, height, frame_count, base_qp, pattern, gop_len, cameras, baseline };
    let mut frames = Vec::with_capacity(frame_count as usize);
    for _ in 0..frame_count {
        let frame_type = match r.u8("frame type")? {
            0 => FrameType::I,
            1 => FrameType::P,
            t => return Err(Error::Corrupt(format!("unknown frame type {t}"))),
        };
        let qp_offset_index = r.u8("qp offset index")?;
        if qp_offset_index as usize >= header.pattern.len() {
            return Err(Error::Corrupt(format!("qp offset index {qp_offset_index} beyond pattern")));
        }
        let mut payloads: [Vec<u8>; PAYLOADS_PER_FRAME] = Default::default();
        for p in payloads.iter_mut() {
            let len = r.u32("payload length")? as usize;
            *p = r.take(len, "payload")?.to_vec();
        }
        frames.push(FramePayload { frame_type, qp_offset_index, payloads });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after last frame", bytes.len() - r.pos)));
    }
    Ok(CodedStream { header, frames })
}
