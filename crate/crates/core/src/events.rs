//! Event stream storage, event-frame aggregation and the `Ex-Sy` clip
//! sampler.

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::{LumaFrame, DEFAULT_FPS};
use crate::v2e::{DvsEvent, Polarity};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const EVT1_HEADER_LEN: usize = 20;
pub const EVT1_RECORD_LEN: usize = 14;

/// A sorted event stream with its sensor geometry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub events: Vec<DvsEvent>,
}

impl EventStream {
    /// Checks bounds and ordering.
    pub fn new(width: u32, height: u32, events: Vec<DvsEvent>) -> Result<Self> {
        let s = Self {
            width,
            height,
            events,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if u32::from(e.x) >= self.width || u32::from(e.y) >= self.height {
                return Err(Error::Stream(format!(
                    "event {i} at ({}, {}) outside {}x{}",
                    e.x, e.y, self.width, self.height
                )));
            }
        }
        if let Some(i) = self.events.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Stream(format!("unsorted at event {}", i + 1)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.events.iter().filter(|e| e.polarity == polarity).count()
    }

    /// Events with `t_start < t <= t_end`.
    pub fn window(&self, t_start_us: u64, t_end_us: u64) -> &[DvsEvent] {
        let lo = self.events.partition_point(|e| e.t_us <= t_start_us);
        let hi = self.events.partition_point(|e| e.t_us <= t_end_us);
        &self.events[lo..hi.max(lo)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Csv,
    Evt1,
}

impl StreamFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => StreamFormat::Csv,
            _ => StreamFormat::Evt1,
        }
    }
}

pub fn encode_evt1(stream: &EventStream) -> Result<Vec<u8>> {
    stream.validate()?;
    let mut out = Vec::with_capacity(EVT1_HEADER_LEN + EVT1_RECORD_LEN * stream.len());
    out.extend_from_slice(EVT1_MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t_us.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity as u8);
        out.push(0);
    }
    Ok(out)
}

pub fn decode_evt1(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < EVT1_HEADER_LEN {
        return Err(Error::Stream(format!(
            "truncated header: {} of {EVT1_HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != EVT1_MAGIC {
        return Err(Error::Stream("bad magic, expected EVT1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let width = u32_at(4);
    let height = u32_at(8);
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[EVT1_HEADER_LEN..];
    if body.len() / EVT1_RECORD_LEN < count {
        return Err(Error::Stream(format!(
            "truncated record {} of {count}",
            body.len() / EVT1_RECORD_LEN
        )));
    }
    let mut events = Vec::with_capacity(count);
    for (i, rec) in body.chunks_exact(EVT1_RECORD_LEN).take(count).enumerate() {
        let polarity = match rec[12] {
            0 => Polarity::Off,
            1 => Polarity::On,
            p => return Err(Error::Stream(format!("record {i}: polarity byte {p}"))),
        };
        events.push(DvsEvent::new(
            u64::from_le_bytes(rec[..8].try_into().unwrap()),
            u16::from_le_bytes([rec[8], rec[9]]),
            u16::from_le_bytes([rec[10], rec[11]]),
            polarity,
        ));
    }
    EventStream::new(width, height, events)
}

pub fn write_csv<W: Write>(stream: &EventStream, out: W) -> Result<()> {
    stream.validate()?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Stream(e.to_string());
    w.write_record(["t_us", "x", "y", "p"]).map_err(csv_err)?;
    for e in &stream.events {
        w.write_record(&[
            e.t_us.to_string(),
            e.x.to_string(),
            e.y.to_string(),
            (e.polarity as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Stream(e.to_string()))?;
    Ok(())
}

/// CSV carries no geometry; when `dims` is `None` it is inferred as the
/// bounding box of the events.
pub fn read_csv<R: Read>(input: R, dims: Option<(u32, u32)>) -> Result<EventStream> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::Stream(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["t_us", "x", "y", "p"] {
        return Err(Error::Stream("CSV header must be t_us,x,y,p".into()));
    }
    let mut events = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Stream(e.to_string()))?;
        let field = |i: usize| -> Result<u64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Stream(format!("CSV line {}: bad field {i}", line + 2)))
        };
        let polarity = match field(3)? {
            0 => Polarity::Off,
            1 => Polarity::On,
            p => return Err(Error::Stream(format!("CSV line {}: polarity {p}", line + 2))),
        };
        let coord = |v: u64| {
            u16::try_from(v).map_err(|_| Error::Stream(format!("CSV line {}: coordinate {v}", line + 2)))
        };
        events.push(DvsEvent::new(field(0)?, coord(field(1)?)?, coord(field(2)?)?, polarity));
    }
    let (width, height) = dims.unwrap_or_else(|| {
        let w = events.iter().map(|e| u32::from(e.x) + 1).max().unwrap_or(0);
        let h = events.iter().map(|e| u32::from(e.y) + 1).max().unwrap_or(0);
        (w, h)
    });
    EventStream::new(width, height, events)
}

pub fn write_stream(path: &Path, stream: &EventStream, format: StreamFormat) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        StreamFormat::Evt1 => out
            .write_all(&encode_evt1(stream)?)
            .map_err(|e| Error::io(path, e))?,
        StreamFormat::Csv => write_csv(stream, &mut out)?,
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_stream(path: &Path, format: StreamFormat) -> Result<EventStream> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    match format {
        StreamFormat::Evt1 => {
            let mut bytes = Vec::new();
            input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
            decode_evt1(&bytes)
        }
        StreamFormat::Csv => read_csv(input, None),
    }
}

/// Two-channel event histogram over one time window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    pub width: usize,
    pub height: usize,
    pub on_counts: Vec<u32>,
    pub off_counts: Vec<u32>,
    pub t_start_us: u64,
    pub t_end_us: u64,
}

impl EventFrame {
    pub fn on(&self, x: usize, y: usize) -> u32 {
        self.on_counts[y * self.width + x]
    }

    pub fn off(&self, x: usize, y: usize) -> u32 {
        self.off_counts[y * self.width + x]
    }

    pub fn total(&self) -> u64 {
        self.on_counts
            .iter()
            .chain(&self.off_counts)
            .map(|&c| u64::from(c))
            .sum()
    }
}

/// Histograms the events with `t_start < t <= t_end`.
pub fn aggregate(
    stream: &EventStream,
    t_start_us: u64,
    t_end_us: u64,
    width: usize,
    height: usize,
) -> Result<EventFrame> {
    if t_end_us <= t_start_us {
        return Err(Error::Stream(format!(
            "empty window ({t_start_us}, {t_end_us}]"
        )));
    }
    let mut on_counts = vec![0u32; width * height];
    let mut off_counts = vec![0u32; width * height];
    for e in stream.window(t_start_us, t_end_us) {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= width || y >= height {
            return Err(Error::Stream(format!(
                "event at ({x}, {y}) outside {width}x{height}"
            )));
        }
        match e.polarity {
            Polarity::On => on_counts[y * width + x] += 1,
            Polarity::Off => off_counts[y * width + x] += 1,
        }
    }
    Ok(EventFrame {
        width,
        height,
        on_counts,
        off_counts,
        t_start_us,
        t_end_us,
    })
}

/// `Ex-Sy`: `x` event frames with `y` skipped frames between neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub x: usize,
    pub y: usize,
    pub fps: f64,
}

impl ClipSpec {
    pub fn new(x: usize, y: usize) -> Result<Self> {
        if x == 0 {
            return Err(Error::Config("clip spec needs at least one event frame".into()));
        }
        Ok(Self {
            x,
            y,
            fps: DEFAULT_FPS,
        })
    }

    pub fn duration_frames(&self) -> usize {
        clip_duration_frames(self)
    }

    pub fn duration_seconds(&self) -> f64 {
        self.duration_frames() as f64 / self.fps
    }

    /// Frame offsets (relative to the clip start) of the used frames.
    pub fn used_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.x).map(move |k| k * (self.y + 1))
    }
}

pub fn clip_duration_frames(spec: &ClipSpec) -> usize {
    spec.x + (spec.x - 1) * spec.y
}

impl FromStr for ClipSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad protocol {s:?}, expected e.g. E4-S3"));
        let (e, k) = s.trim().split_once('-').ok_or_else(bad)?;
        let x = e
            .strip_prefix(['E', 'e'])
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let y = k
            .strip_prefix(['S', 's'])
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        ClipSpec::new(x, y)
    }
}

impl fmt::Display for ClipSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}-S{}", self.x, self.y)
    }
}

/// A labeled grayscale sequence with its event stream.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    pub label: usize,
    pub fps: f64,
    pub frames: Vec<LumaFrame>,
    pub events: EventStream,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_period_us(&self) -> u64 {
        (1e6 / self.fps).round() as u64
    }

    /// Event window attached to frame `j`: the events between it and the
    /// next frame, `(t_j, t_{j+1}]`. The last frame gets one nominal frame
    /// period.
    pub fn window_of(&self, j: usize) -> (u64, u64) {
        let t = self.frames[j].t_us;
        let end = self
            .frames
            .get(j + 1)
            .map_or(t + self.frame_period_us(), |f| f.t_us);
        (t, end)
    }
}

/// One network sample.
#[derive(Debug, Clone)]
pub struct Clip {
    pub event_frames: Vec<EventFrame>,
    /// Gray frames at the used frame positions; the first and last are the
    /// first and last frames of the sampled window.
    pub grays: Vec<LumaFrame>,
    pub label: usize,
    /// Source-frame indices of the used frames.
    pub frame_indices: Vec<usize>,
}

impl Clip {
    pub fn first_gray(&self) -> &LumaFrame {
        &self.grays[0]
    }

    pub fn last_gray(&self) -> &LumaFrame {
        self.grays.last().expect("clip has at least one frame")
    }
}

/// Start frame drawn uniformly from `[0, L - T]`; short sequences (read
/// cyclically) draw from every phase `[0, L - 1]`.
pub fn random_start<R: Rng + ?Sized>(len: usize, spec: &ClipSpec, rng: &mut R) -> usize {
    let t = spec.duration_frames();
    if len >= t {
        rng.gen_range(0..=len - t)
    } else {
        rng.gen_range(0..len)
    }
}

pub fn sample_clip(seq: &Sequence, spec: &ClipSpec, start: usize) -> Result<Clip> {
    let len = seq.len();
    if len == 0 {
        return Err(Error::Dataset(format!("sequence {} is empty", seq.id)));
    }
    let frame_indices: Vec<usize> = spec.used_offsets().map(|o| (start + o) % len).collect();
    let first = &seq.frames[0];
    let mut event_frames = Vec::with_capacity(spec.x);
    let mut grays = Vec::with_capacity(spec.x);
    for &j in &frame_indices {
        let (t0, t1) = seq.window_of(j);
        event_frames.push(aggregate(&seq.events, t0, t1, first.width, first.height)?);
        grays.push(seq.frames[j].clone());
    }
    Ok(Clip {
        event_frames,
        grays,
        label: seq.label,
        frame_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ev(t: u64, x: u16, y: u16, on: bool) -> DvsEvent {
        DvsEvent::new(t, x, y, if on { Polarity::On } else { Polarity::Off })
    }

    #[test]
    fn empty_stream_is_20_bytes() {
        let s = EventStream::new(3, 2, vec![]).unwrap();
        let b = encode_evt1(&s).unwrap();
        assert_eq!(b.len(), 20);
        assert_eq!(&b[..4], b"EVT1");
        assert_eq!(decode_evt1(&b).unwrap(), s);
    }

    #[test]
    fn three_event_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = EventStream::new(
            10,
            10,
            vec![ev(5, 1, 1, true), ev(5, 2, 1, false), ev(9, 0, 3, true)],
        )
        .unwrap();
        for (name, fmt) in [("a.evt1", StreamFormat::Evt1), ("a.csv", StreamFormat::Csv)] {
            let p = dir.path().join(name);
            write_stream(&p, &s, fmt).unwrap();
            let mut back = read_stream(&p, fmt).unwrap();
            if fmt == StreamFormat::Csv {
                back.width = 10;
                back.height = 10;
            }
            assert_eq!(back, s);
        }
    }

    #[test]
    fn csv_line_format() {
        let s = read_csv("t_us,x,y,p\n1000,5,7,1\n".as_bytes(), None).unwrap();
        assert_eq!(s.events, vec![ev(1000, 5, 7, true)]);
        assert_eq!((s.width, s.height), (6, 8));
        assert!(read_csv("t,x,y,p\n".as_bytes(), None).is_err());
        assert!(read_csv("t_us,x,y,p\n1,1,1,2\n".as_bytes(), None).is_err());
    }

    #[test]
    fn evt1_errors() {
        let s = EventStream::new(4, 4, vec![ev(1, 1, 1, true), ev(2, 1, 1, true)]).unwrap();
        let b = encode_evt1(&s).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_evt1(&bad).unwrap_err().to_string().contains("magic"));
        assert!(decode_evt1(&b[..b.len() - 3])
            .unwrap_err()
            .to_string()
            .contains("truncated record"));
        assert!(decode_evt1(&b[..10]).is_err());
        let unsorted = EventStream {
            width: 4,
            height: 4,
            events: vec![ev(2, 1, 1, true), ev(1, 1, 1, true)],
        };
        assert!(encode_evt1(&unsorted).unwrap_err().to_string().contains("unsorted"));
        let outside = EventStream {
            width: 1,
            height: 1,
            events: vec![ev(2, 1, 1, true)],
        };
        assert!(encode_evt1(&outside).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let s = EventStream::new(8, 8, vec![]).unwrap();
        let f = aggregate(&s, 0, 10, 8, 8).unwrap();
        assert_eq!(f.total(), 0);

        let s = EventStream::new(8, 8, vec![ev(5, 3, 2, true)]).unwrap();
        let f = aggregate(&s, 0, 10, 8, 8).unwrap();
        assert_eq!(f.on_counts[2 * 8 + 3], 1);
        assert_eq!(f.total(), 1);

        let mut evs: Vec<_> = (0..5).map(|i| ev(i + 1, 4, 4, true)).collect();
        evs.extend((0..2).map(|i| ev(i + 6, 4, 4, false)));
        evs.sort();
        let s = EventStream::new(8, 8, evs).unwrap();
        let f = aggregate(&s, 0, 10, 8, 8).unwrap();
        assert_eq!((f.on(4, 4), f.off(4, 4)), (5, 2));

        // half-open window: t == t_start is excluded, t == t_end included
        let s = EventStream::new(8, 8, vec![ev(0, 0, 0, true), ev(10, 1, 0, true)]).unwrap();
        let f = aggregate(&s, 0, 10, 8, 8).unwrap();
        assert_eq!((f.on(0, 0), f.on(1, 0)), (0, 1));

        assert!(aggregate(&s, 10, 10, 8, 8).is_err());
        assert!(aggregate(&s, 0, 10, 1, 1).is_err());
    }

    #[test]
    fn protocol_arithmetic() {
        let e4: ClipSpec = "E4-S3".parse().unwrap();
        assert_eq!((e4.x, e4.y), (4, 3));
        assert_eq!(e4.duration_frames(), 13);
        assert!((e4.duration_seconds() - 13.0 / 60.0).abs() < 1e-15);
        let e8: ClipSpec = "E8-S7".parse().unwrap();
        assert_eq!(e8.duration_frames(), 57);
        assert_eq!(ClipSpec::new(1, 0).unwrap().duration_frames(), 1);
        assert!("E0-S1".parse::<ClipSpec>().is_err());
        assert!("E4S3".parse::<ClipSpec>().is_err());
        assert_eq!(e8.to_string(), "E8-S7");
    }

    fn toy_sequence(len: usize) -> Sequence {
        let frames: Vec<LumaFrame> = (0..len)
            .map(|k| LumaFrame::filled(4, 3, k as u8, k as u64 * 1000))
            .collect();
        let events = (0..len as u64)
            .map(|k| ev(k * 1000 + 500, (k % 4) as u16, 0, true))
            .collect();
        Sequence {
            id: "toy".into(),
            label: 2,
            fps: 1000.0,
            frames,
            events: EventStream::new(4, 3, events).unwrap(),
        }
    }

    #[test]
    fn fixed_start_indices() {
        let seq = toy_sequence(20);
        let spec: ClipSpec = "E4-S3".parse().unwrap();
        let clip = sample_clip(&seq, &spec, 0).unwrap();
        assert_eq!(clip.frame_indices, vec![0, 4, 8, 12]);
        assert_eq!(clip.first_gray().data[0], 0);
        assert_eq!(clip.last_gray().data[0], 12);
        assert_eq!(clip.label, 2);
        // each window holds the single event that follows its frame
        assert!(clip.event_frames.iter().all(|f| f.total() == 1));
    }

    #[test]
    fn cyclic_read_for_short_sequences() {
        let seq = toy_sequence(5);
        let spec: ClipSpec = "E4-S3".parse().unwrap();
        let clip = sample_clip(&seq, &spec, 0).unwrap();
        assert_eq!(clip.frame_indices, vec![0, 4 % 5, 8 % 5, 12 % 5]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(random_start(5, &spec, &mut rng) < 5);
        }
        let empty = Sequence {
            frames: vec![],
            ..toy_sequence(1)
        };
        assert!(sample_clip(&empty, &spec, 0).is_err());
    }

    #[test]
    fn random_start_is_uniform() {
        let spec: ClipSpec = "E4-S3".parse().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut hist = [0usize; 88];
        let n = 100_000;
        for _ in 0..n {
            hist[random_start(100, &spec, &mut rng)] += 1;
        }
        // chi-square with 87 degrees of freedom; 0.999 quantile is about 131
        let expected = n as f64 / 88.0;
        let chi2: f64 = hist.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(hist.iter().all(|&c| c > 0));
        assert!(chi2 < 131.0, "chi2 {chi2}");
    }

    #[test]
    fn clip_on_counts_match_stream() {
        let seq = toy_sequence(30);
        let spec: ClipSpec = "E3-S2".parse().unwrap();
        let clip = sample_clip(&seq, &spec, 4).unwrap();
        let expected: usize = clip
            .frame_indices
            .iter()
            .map(|&j| {
                let (a, b) = seq.window_of(j);
                seq.events.window(a, b).iter().filter(|e| e.polarity == Polarity::On).count()
            })
            .sum();
        let got: u64 = clip
            .event_frames
            .iter()
            .map(|f| f.on_counts.iter().map(|&c| u64::from(c)).sum::<u64>())
            .sum();
        assert_eq!(got as usize, expected);
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        prop::collection::vec((0u64..10_000, 0u16..16, 0u16..9, any::<bool>()), 0..200).prop_map(
            |raw| {
                let mut evs: Vec<_> = raw.into_iter().map(|(t, x, y, p)| ev(t, x, y, p)).collect();
                evs.sort();
                EventStream::new(16, 9, evs).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn evt1_round_trip_is_bit_exact(s in arb_stream()) {
            let bytes = encode_evt1(&s).unwrap();
            prop_assert_eq!(bytes.len(), EVT1_HEADER_LEN + EVT1_RECORD_LEN * s.len());
            let back = decode_evt1(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_evt1(&back).unwrap(), bytes);
        }

        #[test]
        fn aggregate_is_additive(s in arb_stream(), t0 in 0u64..3000, d1 in 1u64..4000, d2 in 1u64..4000) {
            let t1 = t0 + d1;
            let t2 = t1 + d2;
            let whole = aggregate(&s, t0, t2, 16, 9).unwrap();
            let a = aggregate(&s, t0, t1, 16, 9).unwrap();
            let b = aggregate(&s, t1, t2, 16, 9).unwrap();
            for i in 0..16 * 9 {
                prop_assert_eq!(whole.on_counts[i], a.on_counts[i] + b.on_counts[i]);
                prop_assert_eq!(whole.off_counts[i], a.off_counts[i] + b.off_counts[i]);
            }
        }
    }
}
