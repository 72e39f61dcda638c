use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ceutrack_core::bbox::BBox;
use ceutrack_core::config::RunConfig;
use ceutrack_core::eval::{aggregate, Attribute, BaselineSRTable, VideoResult};
use ceutrack_core::event_io::{
    generate_synthetic, parse_annotations, parse_attributes, parse_events, parse_results,
    serialize_events_binary, serialize_events_csv, serialize_results, slice_window, EventFormat,
    EventStream, EventWindow, TrackAnnotation,
};
use ceutrack_core::model::{sequence_voxel_inputs, track_sequence, ModelParams};
use ceutrack_core::repr::{
    blend_early_fusion, default_decay_tau, render_event_frame, render_time_surface, Image,
};
use ceutrack_core::selftest::{run_all, SelftestOptions};
use ceutrack_core::voxel::{select_top_k, voxelize, GridSpec, SEARCH_TOP_K};
use ceutrack_core::Error;

use crate::seqdir::{read_file, read_sequence, read_text, write_file, write_scene, Sequence};
use crate::{
    BenchArgs, CliError, CliResult, Command, EvalArgs, EventIoArgs, EventsCommand, FormatArg,
    InitParamsArgs, RenderArgs, RenderMode, SelftestArgs, SynthArgs, TrackArgs, VoxelizeArgs,
};

pub fn dispatch(command: &Command, cfg: &RunConfig) -> CliResult<()> {
    match command {
        Command::Events(EventsCommand::Convert(io)) => cmd_convert(io),
        Command::Events(EventsCommand::Slice { io, t0, t1 }) => cmd_slice(io, *t0, *t1),
        Command::Voxelize(a) => cmd_voxelize(a, cfg),
        Command::Render(a) => cmd_render(a, cfg),
        Command::Track(a) => cmd_track(a, cfg),
        Command::Eval(a) => cmd_eval(a, cfg),
        Command::Synth(a) => cmd_synth(a, cfg),
        Command::Selftest(a) => cmd_selftest(a, cfg),
        Command::Bench(a) => cmd_bench(a, cfg),
        Command::InitParams(a) => cmd_init_params(a, cfg),
    }
}

fn format_of(explicit: Option<FormatArg>, path: &Path) -> CliResult<EventFormat> {
    if let Some(f) = explicit {
        return Ok(match f {
            FormatArg::Csv => EventFormat::Csv,
            FormatArg::Bin => EventFormat::Binary,
        });
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv" | "txt") => Ok(EventFormat::Csv),
        Some("bin" | "evt") => Ok(EventFormat::Binary),
        _ => Err(CliError::Usage(format!(
            "cannot infer event format of {}; pass --from/--to",
            path.display()
        ))),
    }
}

pub fn parse_sensor(s: &str) -> CliResult<(u16, u16)> {
    s.split_once(['x', 'X'])
        .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
        .ok_or_else(|| CliError::Usage(format!("sensor must be WxH, got {s:?}")))
}

pub fn parse_box(s: &str) -> CliResult<BBox> {
    match parse_results(s).map_err(|e| CliError::Usage(format!("bad box {s:?}: {e}")))?[..] {
        [b] => Ok(b),
        _ => Err(CliError::Usage(format!(
            "expected one box x,y,w,h, got {s:?}"
        ))),
    }
}

/// Reads an event file. A zero-byte file is an empty stream in either format.
pub fn read_events(
    path: &Path,
    format: EventFormat,
    sensor: Option<(u16, u16)>,
) -> CliResult<EventStream> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        let (sensor_w, sensor_h) = sensor.unwrap_or((0, 0));
        return Ok(EventStream {
            sensor_w,
            sensor_h,
            events: Vec::new(),
        });
    }
    Ok(parse_events(&bytes, format, sensor)?)
}

pub fn encode_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Csv => serialize_events_csv(&stream.events).into_bytes(),
        EventFormat::Binary => serialize_events_binary(stream),
    }
}

fn sensor_arg(s: &Option<String>) -> CliResult<Option<(u16, u16)>> {
    s.as_deref().map(parse_sensor).transpose()
}

fn cmd_convert(io: &EventIoArgs) -> CliResult<()> {
    let (from, to) = (
        format_of(io.from, &io.input)?,
        format_of(io.to, &io.output)?,
    );
    let stream = read_events(&io.input, from, sensor_arg(&io.sensor)?)?;
    write_file(&io.output, encode_events(&stream, to))?;
    log::info!(
        "{} events written to {}",
        stream.events.len(),
        io.output.display()
    );
    Ok(())
}

fn cmd_slice(io: &EventIoArgs, t0: u64, t1: u64) -> CliResult<()> {
    let (from, to) = (
        format_of(io.from, &io.input)?,
        format_of(io.to, &io.output)?,
    );
    let stream = read_events(&io.input, from, sensor_arg(&io.sensor)?)?;
    let win = slice_window(&stream.events, t0, t1, stream.sensor_w, stream.sensor_h)?;
    let out = EventStream {
        sensor_w: stream.sensor_w,
        sensor_h: stream.sensor_h,
        events: win.events,
    };
    write_file(&io.output, encode_events(&out, to))?;
    Ok(())
}

/// Ground-truth boxes with absent frames replaced by the last visible box.
pub fn carried_boxes(gt: &[TrackAnnotation]) -> CliResult<Vec<BBox>> {
    let first = gt
        .first()
        .filter(|a| !a.absent)
        .ok_or_else(|| Error::Validation("first ground-truth frame must be visible".into()))?;
    let mut last = first.bbox;
    Ok(gt
        .iter()
        .map(|a| {
            if !a.absent {
                last = a.bbox;
            }
            last
        })
        .collect())
}

pub fn template_file(out: &Path) -> PathBuf {
    out.join("template.vox")
}

pub fn search_file(out: &Path, frame: usize) -> PathBuf {
    out.join(format!("search_{frame:06}.vox"))
}

fn cmd_voxelize(a: &VoxelizeArgs, cfg: &RunConfig) -> CliResult<()> {
    let seq = read_sequence(&a.seq)?;
    let boxes = carried_boxes(&seq.gt)?;
    let vox = sequence_voxel_inputs(
        &seq.stream.events,
        &seq.frame_times,
        seq.sensor(),
        &boxes,
        &cfg.model,
        &cfg.tracker,
    )?;
    write_file(&template_file(&a.out), vox.template.to_bytes())?;
    for (i, t) in vox.search.iter().enumerate() {
        write_file(&search_file(&a.out, i + 1), t.to_bytes())?;
    }
    println!(
        "template k={} ({} occupied); {} search tensors k={}",
        vox.template.k(),
        vox.template.occupied,
        vox.search.len(),
        cfg.model.search_k()
    );
    Ok(())
}

/// Window over `[t0, t1)`, defaulting to the span of the stream.
pub fn stream_window(
    stream: &EventStream,
    t0: Option<u64>,
    t1: Option<u64>,
) -> CliResult<EventWindow> {
    let t0 = t0
        .or_else(|| stream.events.first().map(|e| e.t))
        .unwrap_or(0);
    let t1 = t1
        .or_else(|| stream.events.last().map(|e| e.t + 1))
        .unwrap_or(t0 + 1);
    Ok(slice_window(
        &stream.events,
        t0,
        t1,
        stream.sensor_w,
        stream.sensor_h,
    )?)
}

fn cmd_render(a: &RenderArgs, cfg: &RunConfig) -> CliResult<()> {
    let stream = read_events(
        &a.events,
        format_of(a.from, &a.events)?,
        sensor_arg(&a.sensor)?,
    )?;
    let win = stream_window(&stream, a.t0, a.t1)?;
    let (w, h) = (usize::from(win.sensor_w), usize::from(win.sensor_h));
    let bytes = match a.mode {
        RenderMode::Frame => render_event_frame(&win, w, h).to_pnm(1.0),
        RenderMode::Timesurface => {
            let tau = if cfg.decay_tau_us > 0.0 {
                cfg.decay_tau_us
            } else {
                default_decay_tau(&win)
            };
            render_time_surface(&win, w, h, tau)?.to_pnm(255.0)
        }
        RenderMode::Blend => {
            let path = a
                .color
                .as_ref()
                .ok_or_else(|| CliError::Usage("blend needs --color".into()))?;
            let color = Image::from_pnm(&read_file(path)?)?;
            blend_early_fusion(&color.to_rgb(), &render_event_frame(&win, w, h))?.to_pnm(1.0)
        }
    };
    write_file(&a.out, bytes)?;
    Ok(())
}

pub fn load_params(path: Option<&Path>, cfg: &RunConfig) -> CliResult<ModelParams> {
    match path {
        Some(p) => {
            let params = ModelParams::from_bytes(&read_file(p)?)?;
            Ok(params)
        }
        None => Ok(ModelParams::init(&cfg.model, cfg.seed)?),
    }
}

pub fn track_loaded(
    seq: &Sequence,
    init: BBox,
    params: &ModelParams,
    cfg: &RunConfig,
) -> CliResult<Vec<BBox>> {
    Ok(track_sequence(
        &seq.frames,
        &seq.frame_times,
        &seq.stream.events,
        seq.sensor(),
        init,
        params,
        &cfg.tracker,
    )?)
}

fn cmd_track(a: &TrackArgs, cfg: &RunConfig) -> CliResult<()> {
    let seq = read_sequence(&a.seq)?;
    let init = match &a.init {
        Some(s) => parse_box(s)?,
        None => carried_boxes(&seq.gt)?[0],
    };
    let params = load_params(a.params.as_deref(), cfg)?;
    let started = Instant::now();
    let boxes = track_loaded(&seq, init, &params, cfg)?;
    write_file(&a.out, serialize_results(&boxes))?;
    log::info!(
        "tracked {} frames in {:.2?}",
        boxes.len(),
        started.elapsed()
    );
    Ok(())
}

fn txt_stems(dir: &Path) -> CliResult<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids.into_iter().collect())
}

/// Loads every `<id>.txt` of the ground-truth directory with its matching
/// result file, keeping videos tagged `filter` when one is given.
pub fn load_videos(
    results: &Path,
    gt: &Path,
    attributes: Option<&BTreeMap<String, BTreeSet<Attribute>>>,
    filter: Option<Attribute>,
) -> CliResult<Vec<VideoResult>> {
    let mut out = Vec::new();
    for id in txt_stems(gt)? {
        let attrs = attributes
            .and_then(|m| m.get(&id))
            .cloned()
            .unwrap_or_default();
        if filter.is_some_and(|f| !attrs.contains(&f)) {
            continue;
        }
        let annotations = parse_annotations(&read_text(&gt.join(format!("{id}.txt")))?)?;
        let predictions = parse_results(&read_text(&results.join(format!("{id}.txt")))?)?;
        out.push(VideoResult {
            video_id: id,
            predictions,
            gt: annotations,
            attributes: attrs,
        });
    }
    if out.is_empty() {
        return Err(CliError::Core(Error::Validation(format!(
            "no videos to evaluate in {}",
            gt.display()
        ))));
    }
    Ok(out)
}

fn cmd_eval(a: &EvalArgs, cfg: &RunConfig) -> CliResult<()> {
    let attr_path = a.attributes.as_ref().or(cfg.attributes.as_ref());
    let attributes = attr_path
        .map(|p| read_text(p).and_then(|t| parse_attributes(&t)))
        .transpose()?;
    let filter = a
        .attribute
        .as_deref()
        .map(|s| {
            s.parse::<Attribute>()
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .transpose()?;
    if filter.is_some() && attributes.is_none() {
        return Err(CliError::Usage(
            "--attribute needs an attributes file".into(),
        ));
    }
    let videos = load_videos(&a.results, &a.gt, attributes.as_ref(), filter)?;
    let mut report = aggregate(&videos)?;
    match a.baseline.as_ref().or(cfg.baseline_table.as_ref()) {
        Some(p) => report = report.with_boc(&BaselineSRTable::parse_csv(&read_text(p)?)?)?,
        None => eprintln!("note: no baseline table given, BOC omitted"),
    }
    write_file(&a.out_json, report.to_json())?;
    if let Some(csv) = &a.out_csv {
        write_file(csv, report.curves_csv())?;
    }
    let o = &report.overall;
    print!(
        "videos={} SR={:.2} PR={:.2} NPR={:.2}",
        report.n_videos, o.sr, o.pr, o.npr
    );
    match report.boc {
        Some(b) => println!(" BOC={b:.2}"),
        None => println!(),
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, cfg: &RunConfig) -> CliResult<()> {
    let scene = generate_synthetic(&cfg.synth_config())?;
    write_scene(&a.out, &scene)?;
    write_file(&a.out.join("config.txt"), cfg.dump())?;
    println!(
        "{} frames, {} events",
        scene.frames.len(),
        scene.events.len()
    );
    Ok(())
}

fn cmd_selftest(a: &SelftestArgs, cfg: &RunConfig) -> CliResult<()> {
    let results = run_all(&SelftestOptions {
        seed: cfg.seed,
        perturb: a.perturb,
        ..Default::default()
    });
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{tag} {:<18} cases={:<4} worst={:.3e} {}",
            r.name, r.cases, r.worst, r.detail
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(CliError::Internal(format!(
            "{failed} selftest check(s) failed"
        )));
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, _cfg: &RunConfig) -> CliResult<()> {
    if a.repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let format = format_of(a.from, &a.events)?;
    let bytes = read_file(&a.events)?;
    let started = Instant::now();
    let mut processed = 0u64;
    let mut last = None;
    for _ in 0..a.repeat {
        let stream = parse_events(&bytes, format, None)?;
        let win = stream_window(&stream, None, None)?;
        let set = voxelize(&win, &GridSpec::with_defaults(&win))?;
        processed += win.events.len() as u64;
        last = Some(set);
    }
    let secs = started.elapsed().as_secs_f64();
    let set = last.expect("repeat >= 1");
    println!(
        "events={processed} voxels={} seconds={secs:.3} events_per_second={:.0}",
        set.len(),
        processed as f64 / secs.max(1e-9)
    );
    if let Some(out) = &a.out {
        write_file(out, select_top_k(&set.voxels, SEARCH_TOP_K)?.to_bytes())?;
    }
    Ok(())
}

fn cmd_init_params(a: &InitParamsArgs, cfg: &RunConfig) -> CliResult<()> {
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    if let Some(eps) = a.perturb {
        params.perturb(cfg.seed.wrapping_add(1), eps);
    }
    write_file(&a.out, params.to_bytes())?;
    Ok(())
}
