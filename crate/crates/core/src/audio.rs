//! Mono audio buffers, RIFF/WAVE I/O and the segmentation protocols used to
//! build short-utterance conditions.
//!
//! Two segmentations are provided:
//!
//! * [`truncate_midpoint`] cuts one contiguous window out of an utterance,
//!   anchored on its midpoint, to produce the 0.5 s / 1 s / 2 s / full
//!   conditions;
//! * [`repeat_to_duration`] tiles a short utterance end to end, which is the
//!   control for "is it just more audio?".

use crate::fsutil::atomic_write;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("unsupported WAV encoding: format tag {format_tag:#06x}, {bits} bits per sample")]
    Unsupported { format_tag: u16, bits: u16 },
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("invalid segment spec {0:?}")]
    BadSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sample encodings this crate reads and writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// Mono PCM samples in `[-1, 1]` at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, samples: Vec<f32>) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        AudioBuffer {
            sample_rate,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Number of samples covering `seconds`, rounded half away from zero.
pub fn samples_for(seconds: f64, sample_rate: u32) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

// ---------------------------------------------------------------------------
// WAV decoding / encoding

const WAVE_FORMAT_PCM: u16 = 1;
const WAVE_FORMAT_IEEE_FLOAT: u16 = 3;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_err(offset: usize, reason: impl Into<String>) -> AudioError {
    AudioError::Parse {
        offset,
        reason: reason.into(),
    }
}

struct FmtChunk {
    format: SampleFormat,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
}

fn parse_fmt(bytes: &[u8], body: usize, size: usize) -> Result<FmtChunk, AudioError> {
    if size < 16 {
        return Err(parse_err(body, format!("fmt chunk too small ({size} bytes)")));
    }
    let mut tag = le_u16(bytes, body);
    let channels = le_u16(bytes, body + 2);
    let sample_rate = le_u32(bytes, body + 4);
    let block_align = le_u16(bytes, body + 12);
    let bits = le_u16(bytes, body + 14);
    if tag == WAVE_FORMAT_EXTENSIBLE {
        if size < 40 {
            return Err(parse_err(body, "WAVE_FORMAT_EXTENSIBLE fmt chunk too small"));
        }
        // first two bytes of the sub-format GUID carry the real tag
        tag = le_u16(bytes, body + 24);
    }
    if channels == 0 {
        return Err(parse_err(body + 2, "zero channels"));
    }
    if sample_rate == 0 {
        return Err(parse_err(body + 4, "zero sample rate"));
    }
    let format = match (tag, bits) {
        (WAVE_FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (WAVE_FORMAT_IEEE_FLOAT, 32) => SampleFormat::Float32,
        (format_tag, bits) => return Err(AudioError::Unsupported { format_tag, bits }),
    };
    let width = match format {
        SampleFormat::Pcm16 => 2,
        SampleFormat::Float32 => 4,
    };
    if block_align as usize != width * channels as usize {
        return Err(parse_err(
            body + 12,
            format!("block align {block_align} inconsistent with {channels} channels"),
        ));
    }
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        block_align,
    })
}

/// Decodes a RIFF/WAVE byte stream to mono, averaging channels.
pub fn decode_wav(bytes: &[u8]) -> Result<(AudioBuffer, SampleFormat), AudioError> {
    if bytes.len() < 12 {
        return Err(parse_err(0, "file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(parse_err(0, "missing RIFF tag"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(parse_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let declared = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        let available = bytes.len() - body;
        match id {
            b"fmt " => {
                if declared > available {
                    return Err(parse_err(pos + 4, "fmt chunk overruns file"));
                }
                fmt = Some(parse_fmt(bytes, body, declared)?);
            }
            b"data" => {
                // streaming writers leave the size at 0 or u32::MAX; take what is there
                let size = if declared == 0 || declared > available {
                    available
                } else {
                    declared
                };
                data = Some((body, size));
            }
            _ => {}
        }
        pos = body.saturating_add(declared).saturating_add(declared & 1);
        if data.is_some() && fmt.is_some() {
            break;
        }
    }
    let fmt = fmt.ok_or_else(|| parse_err(12, "no fmt chunk"))?;
    let (start, size) = data.ok_or_else(|| parse_err(12, "no data chunk"))?;
    let frame = fmt.block_align as usize;
    let channels = fmt.channels as usize;
    let frames = size / frame;
    let mut samples = Vec::with_capacity(frames);
    for f in 0..frames {
        let base = start + f * frame;
        let mut acc = 0.0f64;
        for c in 0..channels {
            acc += match fmt.format {
                SampleFormat::Pcm16 => {
                    i16::from_le_bytes([bytes[base + 2 * c], bytes[base + 2 * c + 1]]) as f64
                        / 32768.0
                }
                SampleFormat::Float32 => {
                    let at = base + 4 * c;
                    f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
                        as f64
                }
            };
        }
        samples.push((acc / channels as f64) as f32);
    }
    Ok((AudioBuffer::new(fmt.sample_rate, samples), fmt.format))
}

/// Encodes a mono buffer. PCM-16 output is clipped to the representable range.
pub fn encode_wav(audio: &AudioBuffer, format: SampleFormat) -> Vec<u8> {
    let (tag, width) = match format {
        SampleFormat::Pcm16 => (WAVE_FORMAT_PCM, 2u16),
        SampleFormat::Float32 => (WAVE_FORMAT_IEEE_FLOAT, 4u16),
    };
    let data_len = audio.samples.len() * width as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * width as u32).to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(width * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &audio.samples {
        match format {
            SampleFormat::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

pub fn load_wav(path: &Path) -> Result<AudioBuffer, AudioError> {
    Ok(load_wav_with_format(path)?.0)
}

pub fn load_wav_with_format(path: &Path) -> Result<(AudioBuffer, SampleFormat), AudioError> {
    decode_wav(&fs::read(path)?)
}

/// Writes atomically (temp file + rename).
pub fn write_wav(path: &Path, audio: &AudioBuffer, format: SampleFormat) -> Result<(), AudioError> {
    Ok(atomic_write(path, &encode_wav(audio, format))?)
}

// ---------------------------------------------------------------------------
// Segmentation

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentDuration {
    Full,
    Seconds(f64),
}

impl SegmentDuration {
    /// Stable label used in file names and reports: `full`, `0.5`, `1`, `2`.
    pub fn label(&self) -> String {
        match self {
            SegmentDuration::Full => "full".to_string(),
            SegmentDuration::Seconds(s) => format!("{s}"),
        }
    }
}

impl fmt::Display for SegmentDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SegmentDuration {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("full") {
            return Ok(SegmentDuration::Full);
        }
        let num = t.strip_suffix('s').unwrap_or(t);
        match num.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(SegmentDuration::Seconds(v)),
            _ => Err(AudioError::BadSpec(s.to_string())),
        }
    }
}

/// Where the window sits relative to the utterance midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Anchor {
    /// Window centred on sample `len / 2`.
    #[default]
    Centered,
    /// Window starting at sample `len / 2`.
    StartAtMidpoint,
}

impl FromStr for Anchor {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centered" | "center" => Ok(Anchor::Centered),
            "start" | "start_at_midpoint" => Ok(Anchor::StartAtMidpoint),
            _ => Err(AudioError::BadSpec(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpec {
    pub duration: SegmentDuration,
    pub anchor: Anchor,
}

impl SegmentSpec {
    pub fn seconds(s: f64) -> Self {
        SegmentSpec {
            duration: SegmentDuration::Seconds(s),
            anchor: Anchor::Centered,
        }
    }

    pub fn full() -> Self {
        SegmentSpec {
            duration: SegmentDuration::Full,
            anchor: Anchor::Centered,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub audio: AudioBuffer,
    /// Set when the input was shorter than the requested window and was
    /// returned whole.
    pub short_input: bool,
}

/// Cuts a window of `round(duration * sample_rate)` samples around the
/// utterance midpoint. Inputs shorter than the window are returned whole and
/// flagged, never padded.
///
/// ```
/// use ttasv::audio::{truncate_midpoint, AudioBuffer, SegmentSpec};
/// let a = AudioBuffer::new(16_000, (0..160_000).map(|i| i as f32 / 160_000.0).collect());
/// let seg = truncate_midpoint(&a, &SegmentSpec::seconds(2.0)).unwrap();
/// assert_eq!(seg.audio.samples[..], a.samples[64_000..96_000]);
/// ```
pub fn truncate_midpoint(a: &AudioBuffer, spec: &SegmentSpec) -> Result<Segment, AudioError> {
    if a.is_empty() {
        return Err(AudioError::Degenerate("empty audio buffer"));
    }
    let secs = match spec.duration {
        SegmentDuration::Full => {
            return Ok(Segment {
                audio: a.clone(),
                short_input: false,
            })
        }
        SegmentDuration::Seconds(s) => s,
    };
    let want = samples_for(secs, a.sample_rate).max(1);
    let len = a.len();
    if want > len {
        return Ok(Segment {
            audio: a.clone(),
            short_input: true,
        });
    }
    let mid = len / 2;
    let start = match spec.anchor {
        Anchor::Centered => mid.saturating_sub(want / 2),
        Anchor::StartAtMidpoint => mid,
    }
    .min(len - want);
    Ok(Segment {
        audio: AudioBuffer::new(a.sample_rate, a.samples[start..start + want].to_vec()),
        short_input: false,
    })
}

/// Tiles `a` end to end and cuts the result to exactly
/// `round(target_s * sample_rate)` samples.
pub fn repeat_to_duration(a: &AudioBuffer, target_s: f64) -> Result<AudioBuffer, AudioError> {
    if a.is_empty() {
        return Err(AudioError::Degenerate("empty audio buffer"));
    }
    if !(target_s > 0.0 && target_s.is_finite()) {
        return Err(AudioError::BadSpec(format!("{target_s}")));
    }
    let n = samples_for(target_s, a.sample_rate);
    let samples = a.samples.iter().copied().cycle().take(n).collect();
    Ok(AudioBuffer::new(a.sample_rate, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(secs: f64, sr: u32) -> AudioBuffer {
        let n = samples_for(secs, sr);
        AudioBuffer::new(sr, (0..n).map(|i| (i as f32 / n as f32) * 2.0 - 1.0).collect())
    }

    fn wav_bytes(channels: u16, sr: u32, tag: u16, bits: u16, frames: &[Vec<i16>]) -> Vec<u8> {
        let block = channels * bits / 8;
        let data_len = frames.len() * block as usize;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&sr.to_le_bytes());
        out.extend_from_slice(&(sr * block as u32).to_le_bytes());
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for f in frames {
            for s in f {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn pcm16_silence() {
        let bytes = wav_bytes(1, 16_000, 1, 16, &vec![vec![0]; 16_000]);
        let (a, fmt) = decode_wav(&bytes).unwrap();
        assert_eq!(fmt, SampleFormat::Pcm16);
        assert_eq!(a.sample_rate, 16_000);
        assert_eq!(a.samples.len(), 16_000);
        assert!(a.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale() {
        let bytes = wav_bytes(1, 8_000, 1, 16, &[vec![32767], vec![-32768]]);
        let (a, _) = decode_wav(&bytes).unwrap();
        assert!((a.samples[0] as f64 - 32767.0 / 32768.0).abs() < 1e-9);
        assert_eq!(a.samples[1], -1.0);
    }

    #[test]
    fn stereo_is_averaged() {
        let bytes = wav_bytes(2, 16_000, 1, 16, &vec![vec![16384, -16384]; 100]);
        let (a, _) = decode_wav(&bytes).unwrap();
        assert_eq!(a.samples.len(), 100);
        assert!(a.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn unsupported_codec() {
        let bytes = wav_bytes(1, 16_000, 1, 8, &[]);
        assert!(matches!(
            decode_wav(&bytes),
            Err(AudioError::Unsupported { format_tag: 1, bits: 8 })
        ));
        let alaw = wav_bytes(1, 16_000, 6, 16, &[]);
        assert!(matches!(decode_wav(&alaw), Err(AudioError::Unsupported { .. })));
    }

    #[test]
    fn malformed_header_reports_offset() {
        let mut bytes = wav_bytes(1, 16_000, 1, 16, &[vec![0]]);
        bytes[8..12].copy_from_slice(b"WAVX");
        match decode_wav(&bytes) {
            Err(AudioError::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        match decode_wav(b"RIFF") {
            Err(AudioError::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn float32_round_trip() {
        let a = ramp(0.01, 16_000);
        let (b, fmt) = decode_wav(&encode_wav(&a, SampleFormat::Float32)).unwrap();
        assert_eq!(fmt, SampleFormat::Float32);
        assert_eq!(a, b);
    }

    #[test]
    fn pcm16_encode_decode_is_stable() {
        let a = ramp(0.01, 16_000);
        let once = decode_wav(&encode_wav(&a, SampleFormat::Pcm16)).unwrap().0;
        let twice = decode_wav(&encode_wav(&once, SampleFormat::Pcm16)).unwrap().0;
        assert_eq!(once, twice);
        for (x, y) in a.samples.iter().zip(&once.samples) {
            assert!((x - y).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn midpoint_window_ten_seconds() {
        let a = ramp(10.0, 16_000);
        let seg = truncate_midpoint(&a, &SegmentSpec::seconds(2.0)).unwrap();
        assert!(!seg.short_input);
        assert_eq!(seg.audio.samples[..], a.samples[64_000..96_000]);
    }

    #[test]
    fn start_anchor_window() {
        let a = ramp(10.0, 16_000);
        let spec = SegmentSpec {
            duration: SegmentDuration::Seconds(2.0),
            anchor: Anchor::StartAtMidpoint,
        };
        let seg = truncate_midpoint(&a, &spec).unwrap();
        assert_eq!(seg.audio.samples[..], a.samples[80_000..112_000]);
        // clamped at the end when the window would overrun
        let spec = SegmentSpec {
            duration: SegmentDuration::Seconds(8.0),
            anchor: Anchor::StartAtMidpoint,
        };
        let seg = truncate_midpoint(&a, &spec).unwrap();
        assert_eq!(seg.audio.samples[..], a.samples[32_000..]);
    }

    #[test]
    fn full_is_identity() {
        let a = ramp(10.0, 16_000);
        let seg = truncate_midpoint(&a, &SegmentSpec::full()).unwrap();
        assert_eq!(seg.audio, a);
        assert!(!seg.short_input);
    }

    #[test]
    fn short_input_is_flagged_not_padded() {
        let a = ramp(0.3, 16_000);
        let seg = truncate_midpoint(&a, &SegmentSpec::seconds(0.5)).unwrap();
        assert!(seg.short_input);
        assert_eq!(seg.audio, a);
    }

    #[test]
    fn empty_input_is_degenerate() {
        let a = AudioBuffer::new(16_000, vec![]);
        assert!(matches!(
            truncate_midpoint(&a, &SegmentSpec::seconds(1.0)),
            Err(AudioError::Degenerate(_))
        ));
        assert!(matches!(repeat_to_duration(&a, 15.0), Err(AudioError::Degenerate(_))));
    }

    #[test]
    fn repeat_half_second_to_fifteen() {
        let a = ramp(0.5, 16_000);
        let r = repeat_to_duration(&a, 15.0).unwrap();
        assert_eq!(r.len(), 240_000);
        for chunk in r.samples.chunks(a.len()) {
            assert_eq!(chunk, &a.samples[..]);
        }
        assert_eq!(r.len() / a.len(), 30);
    }

    #[test]
    fn repeat_four_seconds_to_fifteen() {
        let a = ramp(4.0, 16_000);
        let r = repeat_to_duration(&a, 15.0).unwrap();
        assert_eq!(r.len(), 240_000);
        assert_eq!(r.samples[192_000..], a.samples[..48_000]);
    }

    #[test]
    fn repeat_shorter_target_truncates() {
        let a = ramp(15.0, 16_000);
        let r = repeat_to_duration(&a, 2.0).unwrap();
        assert_eq!(r.samples[..], a.samples[..32_000]);
    }

    #[test]
    fn duration_spec_parsing() {
        assert_eq!("full".parse::<SegmentDuration>().unwrap(), SegmentDuration::Full);
        assert_eq!("0.5".parse::<SegmentDuration>().unwrap(), SegmentDuration::Seconds(0.5));
        assert_eq!("2s".parse::<SegmentDuration>().unwrap(), SegmentDuration::Seconds(2.0));
        assert!("-1".parse::<SegmentDuration>().is_err());
        assert_eq!(SegmentDuration::Seconds(1.0).label(), "1");
        assert_eq!(SegmentDuration::Seconds(0.5).label(), "0.5");
    }
}
