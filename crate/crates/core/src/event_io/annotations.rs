use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::eval::Attribute;

/// Ground truth for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackAnnotation {
    pub frame_idx: usize,
    pub bbox: BBox,
    pub absent: bool,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_box(fields: &[&str], line: usize) -> Result<BBox> {
    let mut v = [0.0f64; 4];
    for (slot, f) in v.iter_mut().zip(fields) {
        *slot = f.parse::<f64>().map_err(|_| Error::ParseLine {
            line,
            msg: format!("non-numeric field '{f}'"),
        })?;
        if !slot.is_finite() {
            return Err(Error::ParseLine {
                line,
                msg: format!("non-finite field '{f}'"),
            });
        }
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split([',', '\t', ' '])
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .collect()
}

/// Parses ground truth lines `x,y,w,h,absent`; line i becomes frame i.
pub fn parse_annotations(text: &str) -> Result<Vec<TrackAnnotation>> {
    data_lines(text)
        .enumerate()
        .map(|(frame_idx, (line, l))| {
            let fields = split_fields(l);
            if fields.len() != 5 {
                return Err(Error::ParseLine {
                    line,
                    msg: format!("expected 5 fields (x,y,w,h,absent), found {}", fields.len()),
                });
            }
            let bbox = parse_box(&fields[..4], line)?;
            let absent = match fields[4] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::ParseLine {
                        line,
                        msg: format!("absent flag must be 0 or 1, found '{other}'"),
                    })
                }
            };
            if !absent && (bbox.w < 0.0 || bbox.h < 0.0) {
                return Err(Error::ParseLine {
                    line,
                    msg: "negative width or height on a visible frame".into(),
                });
            }
            Ok(TrackAnnotation {
                frame_idx,
                bbox,
                absent,
            })
        })
        .collect()
}

/// Parses tracker output lines `x,y,w,h`.
pub fn parse_results(text: &str) -> Result<Vec<BBox>> {
    data_lines(text)
        .map(|(line, l)| {
            let fields = split_fields(l);
            if fields.len() != 4 {
                return Err(Error::ParseLine {
                    line,
                    msg: format!("expected 4 fields (x,y,w,h), found {}", fields.len()),
                });
            }
            let b = parse_box(&fields, line)?;
            if b.w < 0.0 || b.h < 0.0 {
                return Err(Error::ParseLine {
                    line,
                    msg: "negative width or height".into(),
                });
            }
            Ok(b)
        })
        .collect()
}

pub fn serialize_annotations(annotations: &[TrackAnnotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        let b = a.bbox;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            b.x,
            b.y,
            b.w,
            b.h,
            u8::from(a.absent)
        );
    }
    out
}

pub fn serialize_results(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(out, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    out
}

/// Parses `video_id,ATTR1|ATTR2|...` lines.
pub fn parse_attributes(text: &str) -> Result<BTreeMap<String, BTreeSet<Attribute>>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        let (id, tags) = l.split_once(',').unwrap_or((l, ""));
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::ParseLine {
                line,
                msg: "missing video id".into(),
            });
        }
        let mut set = BTreeSet::new();
        for tag in tags.split('|').map(str::trim).filter(|t| !t.is_empty()) {
            let attr = tag.parse::<Attribute>().map_err(|_| Error::ParseLine {
                line,
                msg: format!("unknown attribute '{tag}'"),
            })?;
            set.insert(attr);
        }
        if out.insert(id.to_string(), set).is_some() {
            return Err(Error::ParseLine {
                line,
                msg: format!("duplicate video id '{id}'"),
            });
        }
    }
    Ok(out)
}

pub fn serialize_attributes(map: &BTreeMap<String, BTreeSet<Attribute>>) -> String {
    let mut out = String::new();
    for (id, set) in map {
        let tags: Vec<&str> = set.iter().map(|a| a.code()).collect();
        let _ = writeln!(out, "{id},{}", tags.join("|"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn visible_frame() {
        let a = parse_annotations("10,20,30,40,0").unwrap();
        assert_eq!(a[0].bbox, BBox::new(10.0, 20.0, 30.0, 40.0));
        assert!(!a[0].absent);
    }

    #[test]
    fn absent_frame() {
        let a = parse_annotations("0,0,0,0,1\n").unwrap();
        assert!(a[0].absent);
    }

    #[test]
    fn fifty_lines_indexed() {
        let text: String = (0..50).map(|i| format!("{i},1,2,3,0\n")).collect();
        let a = parse_annotations(&text).unwrap();
        assert_eq!(a.len(), 50);
        assert!(a.iter().enumerate().all(|(i, x)| x.frame_idx == i));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse_annotations("1,2,3,4,0\n1,2,a,4,0\n").unwrap_err() {
            Error::ParseLine { line, .. } => assert_eq!(line, 2),
            e => panic!("{e:?}"),
        }
        match parse_annotations("1,2,3,4,0\n1,2,3,4,0\n1,2,-3,4,0\n").unwrap_err() {
            Error::ParseLine { line, .. } => assert_eq!(line, 3),
            e => panic!("{e:?}"),
        }
        // degenerate box allowed when absent
        assert!(parse_annotations("1,2,-3,4,1").is_ok());
        assert!(parse_results("1,2,3").is_err());
    }

    #[test]
    fn attributes_file() {
        let m = parse_attributes("vid_a,FOC|MB\nvid_b,\n").unwrap();
        assert_eq!(m["vid_a"].len(), 2);
        assert!(m["vid_b"].is_empty());
        assert!(parse_attributes("v,NOPE").is_err());
        assert_eq!(parse_attributes(&serialize_attributes(&m)).unwrap(), m);
    }

    proptest! {
        #[test]
        fn annotation_round_trip(rows in proptest::collection::vec((-1e4f64..1e4, -1e4f64..1e4, 0f64..1e3, 0f64..1e3, any::<bool>()), 0..40)) {
            let ann: Vec<TrackAnnotation> = rows.iter().enumerate().map(|(i, r)| TrackAnnotation {
                frame_idx: i, bbox: BBox::new(r.0, r.1, r.2, r.3), absent: r.4,
            }).collect();
            prop_assert_eq!(parse_annotations(&serialize_annotations(&ann)).unwrap(), ann.clone());
            let boxes: Vec<BBox> = ann.iter().map(|a| a.bbox).collect();
            prop_assert_eq!(parse_results(&serialize_results(&boxes)).unwrap(), boxes);
        }
    }
}
