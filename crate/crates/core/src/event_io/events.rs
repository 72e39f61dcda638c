use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVT1";
/// u64 t, u16 x, u16 y, i8 p, then 3 zero bytes to align the record to 16.
pub const BINARY_RECORD_LEN: usize = 16;
const BINARY_HEADER_LEN: usize = 4 + 2 + 2 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn from_i8(p: i8) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn sign(self) -> f64 {
        f64::from(self.as_i8())
    }
}

/// A single asynchronous event: timestamp in microseconds, pixel and polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventPoint {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl EventPoint {
    pub const fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Events with their declared sensor resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub sensor_w: u16,
    pub sensor_h: u16,
    pub events: Vec<EventPoint>,
}

/// Events falling in the half-open interval `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventWindow {
    pub events: Vec<EventPoint>,
    pub t_start: u64,
    pub t_end: u64,
    pub sensor_w: u16,
    pub sensor_h: u16,
}

impl EventWindow {
    pub fn duration(&self) -> u64 {
        self.t_end.saturating_sub(self.t_start)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl std::str::FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "bin" | "binary" => Ok(EventFormat::Binary),
            other => Err(Error::InvalidArgument(format!(
                "unknown event format '{other}'"
            ))),
        }
    }
}

/// Parses events in either format. For CSV the sensor size is taken from
/// `sensor` when given (and validated), otherwise inferred from the data.
pub fn parse_events(
    bytes: &[u8],
    format: EventFormat,
    sensor: Option<(u16, u16)>,
) -> Result<EventStream> {
    match format {
        EventFormat::Binary => {
            let stream = parse_events_binary(bytes)?;
            if let Some((w, h)) = sensor {
                if (w, h) != (stream.sensor_w, stream.sensor_h) {
                    return Err(Error::Validation(format!(
                        "declared sensor {w}x{h} differs from file header {}x{}",
                        stream.sensor_w, stream.sensor_h
                    )));
                }
            }
            Ok(stream)
        }
        EventFormat::Csv => {
            let text = std::str::from_utf8(bytes).map_err(|e| Error::ParseAt {
                offset: e.valid_up_to(),
                msg: "invalid UTF-8".into(),
            })?;
            let events = parse_events_csv(text, sensor)?;
            let (sensor_w, sensor_h) = sensor.unwrap_or_else(|| infer_sensor(&events));
            Ok(EventStream {
                sensor_w,
                sensor_h,
                events,
            })
        }
    }
}

fn infer_sensor(events: &[EventPoint]) -> (u16, u16) {
    let w = events
        .iter()
        .map(|e| e.x)
        .max()
        .map_or(0, |x| x.saturating_add(1));
    let h = events
        .iter()
        .map(|e| e.y)
        .max()
        .map_or(0, |y| y.saturating_add(1));
    (w, h)
}

/// Parses `t,x,y,p` lines. A non-numeric first line is treated as a header.
/// Polarity 0 is read as negative.
pub fn parse_events_csv(text: &str, sensor: Option<(u16, u16)>) -> Result<Vec<EventPoint>> {
    let mut events = Vec::new();
    let mut offset = 0usize;
    for (idx, raw) in text.split_inclusive('\n').enumerate() {
        let line_offset = offset;
        offset += raw.len();
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && !line.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        let err = |msg: String| Error::ParseAt {
            offset: line_offset,
            msg: format!("line {}: {msg}", idx + 1),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad timestamp '{}'", fields[0])))?;
        let x: u16 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad x '{}'", fields[1])))?;
        let y: u16 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad y '{}'", fields[2])))?;
        let p = match fields[3] {
            "1" | "+1" => Polarity::Positive,
            "-1" | "0" => Polarity::Negative,
            other => return Err(err(format!("bad polarity '{other}'"))),
        };
        if let Some((w, h)) = sensor {
            check_bounds(x, y, w, h, line_offset)?;
        }
        events.push(EventPoint { t, x, y, p });
    }
    Ok(events)
}

fn check_bounds(x: u16, y: u16, w: u16, h: u16, offset: usize) -> Result<()> {
    if x >= w || y >= h {
        return Err(Error::Validation(format!(
            "event at byte {offset}: pixel ({x},{y}) outside {w}x{h} sensor"
        )));
    }
    Ok(())
}

pub fn serialize_events_csv(events: &[EventPoint]) -> String {
    let mut out = String::with_capacity(events.len() * 16);
    for e in events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8());
    }
    out
}

pub fn parse_events_binary(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err(Error::ParseAt {
            offset: bytes.len(),
            msg: format!(
                "truncated header ({} of {BINARY_HEADER_LEN} bytes)",
                bytes.len()
            ),
        });
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(Error::ParseAt {
            offset: 0,
            msg: "bad magic, expected EVT1".into(),
        });
    }
    let sensor_w = u16::from_le_bytes([bytes[4], bytes[5]]);
    let sensor_h = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[BINARY_HEADER_LEN..];
    let available = body.len() / BINARY_RECORD_LEN;
    if (available as u64) < count {
        return Err(Error::ParseAt {
            offset: BINARY_HEADER_LEN + available * BINARY_RECORD_LEN,
            msg: format!("truncated record: header declares {count} events, found {available}"),
        });
    }
    let expected_len = count as usize * BINARY_RECORD_LEN;
    if body.len() != expected_len {
        return Err(Error::ParseAt {
            offset: BINARY_HEADER_LEN + expected_len,
            msg: format!(
                "{} trailing bytes after last record",
                body.len() - expected_len
            ),
        });
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let offset = BINARY_HEADER_LEN + i * BINARY_RECORD_LEN;
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = Polarity::from_i8(rec[12] as i8).ok_or_else(|| Error::ParseAt {
            offset,
            msg: format!("bad polarity byte {}", rec[12] as i8),
        })?;
        check_bounds(x, y, sensor_w, sensor_h, offset)?;
        events.push(EventPoint { t, x, y, p });
    }
    Ok(EventStream {
        sensor_w,
        sensor_h,
        events,
    })
}

pub fn serialize_events_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + stream.events.len() * BINARY_RECORD_LEN);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&stream.sensor_w.to_le_bytes());
    out.extend_from_slice(&stream.sensor_h.to_le_bytes());
    out.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.as_i8() as u8);
        out.extend_from_slice(&[0u8; 3]);
    }
    out
}

/// Returns the events with `t0 <= t < t1`, preserving order.
pub fn slice_window(
    events: &[EventPoint],
    t0: u64,
    t1: u64,
    sensor_w: u16,
    sensor_h: u16,
) -> Result<EventWindow> {
    if t0 >= t1 {
        return Err(Error::InvalidArgument(format!(
            "empty time interval [{t0}, {t1})"
        )));
    }
    if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
        return Err(Error::Validation(format!(
            "events not sorted by timestamp at index {}",
            i + 1
        )));
    }
    let lo = events.partition_point(|e| e.t < t0);
    let hi = events.partition_point(|e| e.t < t1);
    Ok(EventWindow {
        events: events[lo..hi].to_vec(),
        t_start: t0,
        t_end: t1,
        sensor_w,
        sensor_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_events(n: usize, seed: u64) -> Vec<EventPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<EventPoint> = (0..n)
            .map(|_| {
                EventPoint::new(
                    rng.gen_range(0..1_000_000),
                    rng.gen_range(0..346),
                    rng.gen_range(0..260),
                    if rng.gen_bool(0.5) {
                        Polarity::Positive
                    } else {
                        Polarity::Negative
                    },
                )
            })
            .collect();
        events.sort_by_key(|e| e.t);
        events
    }

    #[test]
    fn empty_csv_is_empty() {
        assert!(parse_events_csv("", None).unwrap().is_empty());
    }

    #[test]
    fn single_csv_line() {
        let ev = parse_events_csv("1000,5,7,1", None).unwrap();
        assert_eq!(ev, vec![EventPoint::new(1000, 5, 7, Polarity::Positive)]);
    }

    #[test]
    fn csv_header_and_zero_polarity() {
        let ev = parse_events_csv("t,x,y,p\n10,1,2,0\n11,1,2,-1\n", None).unwrap();
        assert_eq!(ev.len(), 2);
        assert!(ev.iter().all(|e| e.p == Polarity::Negative));
    }

    #[test]
    fn csv_malformed_reports_offset() {
        let err = parse_events_csv("1,2,3,1\n4,5,x,1\n", None).unwrap_err();
        match err {
            Error::ParseAt { offset, .. } => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_out_of_range_is_validation_error() {
        let err = parse_events_csv("1,20,3,1\n", Some((20, 10))).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn binary_round_trip_10k() {
        let stream = EventStream {
            sensor_w: 346,
            sensor_h: 260,
            events: random_events(10_000, 7),
        };
        let bytes = serialize_events_binary(&stream);
        assert_eq!(bytes.len(), 16 + 16 * 10_000);
        assert_eq!(parse_events_binary(&bytes).unwrap(), stream);
    }

    #[test]
    fn binary_truncated_record() {
        let stream = EventStream {
            sensor_w: 346,
            sensor_h: 260,
            events: random_events(3, 1),
        };
        let bytes = serialize_events_binary(&stream);
        let err = parse_events_binary(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            Error::ParseAt { offset, .. } => assert_eq!(offset, 16 + 2 * 16),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_out_of_range() {
        let stream = EventStream {
            sensor_w: 10,
            sensor_h: 10,
            events: vec![EventPoint::new(0, 10, 0, Polarity::Positive)],
        };
        let err = parse_events_binary(&serialize_events_binary(&stream)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn window_half_open() {
        let ev = vec![
            EventPoint::new(10, 0, 0, Polarity::Positive),
            EventPoint::new(20, 0, 0, Polarity::Negative),
        ];
        let w = slice_window(&ev, 10, 20, 4, 4).unwrap();
        assert_eq!(w.events, vec![ev[0]]);
        assert!(slice_window(&ev, 30, 40, 4, 4).unwrap().is_empty());
    }

    #[test]
    fn window_rejects_unsorted() {
        let ev = vec![
            EventPoint::new(20, 0, 0, Polarity::Positive),
            EventPoint::new(10, 0, 0, Polarity::Negative),
        ];
        assert!(slice_window(&ev, 0, 30, 4, 4).is_err());
        assert!(slice_window(&ev[..1], 5, 5, 4, 4).is_err());
    }

    #[test]
    fn window_matches_linear_scan() {
        let ev = random_events(1000, 3);
        let (t0, t1) = (250_000, 750_000);
        let w = slice_window(&ev, t0, t1, 346, 260).unwrap();
        let scan: Vec<_> = ev
            .iter()
            .copied()
            .filter(|e| e.t >= t0 && e.t < t1)
            .collect();
        assert_eq!(w.events, scan);
    }

    proptest! {
        #[test]
        fn adjacent_windows_partition(seed in 0u64..1000, a in 0u64..500_000, b in 0u64..500_000, c in 0u64..500_000) {
            let mut ts = [a, a + b + 1, a + b + c + 2];
            ts.sort();
            let ev = random_events(300, seed);
            let w01 = slice_window(&ev, ts[0], ts[1], 346, 260).unwrap();
            let w12 = slice_window(&ev, ts[1], ts[2], 346, 260).unwrap();
            let w02 = slice_window(&ev, ts[0], ts[2], 346, 260).unwrap();
            let mut joined = w01.events.clone();
            joined.extend(w12.events);
            prop_assert_eq!(joined, w02.events);
        }

        #[test]
        fn csv_round_trip(seed in 0u64..1000) {
            let ev = random_events(50, seed);
            prop_assert_eq!(parse_events_csv(&serialize_events_csv(&ev), None).unwrap(), ev);
        }
    }
}
