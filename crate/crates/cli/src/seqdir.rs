//! On-disk sequence directories:
//!
//! ```text
//! DIR/frames/000000.pgm ...   8-bit frames (PGM or PPM)
//! DIR/frame_times.txt         one timestamp in microseconds per frame
//! DIR/events.bin              binary event stream with sensor header
//! DIR/groundtruth.txt         x,y,w,h,absent per frame (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ceutrack_core::event_io::{
    parse_annotations, parse_events_binary, serialize_annotations, serialize_events_binary,
    EventStream, SyntheticScene, TrackAnnotation,
};
use ceutrack_core::repr::Image;
use ceutrack_core::{Error, Result};

pub const FRAMES_DIR: &str = "frames";
pub const FRAME_TIMES: &str = "frame_times.txt";
pub const EVENTS: &str = "events.bin";
pub const GROUNDTRUTH: &str = "groundtruth.txt";

#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Image>,
    pub frame_times: Vec<u64>,
    pub stream: EventStream,
    pub gt: Vec<TrackAnnotation>,
}

impl Sequence {
    pub fn sensor(&self) -> (u16, u16) {
        (self.stream.sensor_w, self.stream.sensor_h)
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn frame_path(dir: &Path, idx: usize, channels: usize) -> PathBuf {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    dir.join(FRAMES_DIR).join(format!("{idx:06}.{ext}"))
}

pub fn write_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    for (i, f) in scene.frames.iter().enumerate() {
        write_file(&frame_path(dir, i, f.channels), f.to_pnm(1.0))?;
    }
    let times: String = scene.frame_times.iter().map(|t| format!("{t}\n")).collect();
    write_file(&dir.join(FRAME_TIMES), times)?;
    let stream = EventStream {
        sensor_w: scene.sensor_w,
        sensor_h: scene.sensor_h,
        events: scene.events.clone(),
    };
    write_file(&dir.join(EVENTS), serialize_events_binary(&stream))?;
    write_file(&dir.join(GROUNDTRUTH), serialize_annotations(&scene.gt))
}

fn parse_times(text: &str) -> Result<Vec<u64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::ParseLine {
                line: i + 1,
                msg: format!("bad frame timestamp {l:?}"),
            })
        })
        .collect()
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let frame_times = parse_times(&read_text(&dir.join(FRAME_TIMES))?)?;
    let stream = parse_events_binary(&read_file(&dir.join(EVENTS))?)?;
    let mut frames = Vec::with_capacity(frame_times.len());
    for i in 0..frame_times.len() {
        let gray = frame_path(dir, i, 1);
        let path = if gray.exists() {
            gray
        } else {
            frame_path(dir, i, 3)
        };
        frames.push(Image::from_pnm(&read_file(&path)?)?);
    }
    let gt_path = dir.join(GROUNDTRUTH);
    let gt = if gt_path.exists() {
        parse_annotations(&read_text(&gt_path)?)?
    } else {
        Vec::new()
    };
    Ok(Sequence {
        frames,
        frame_times,
        stream,
        gt,
    })
}
