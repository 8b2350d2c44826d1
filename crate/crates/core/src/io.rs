//! File formats: sequence catalog (CSV or JSON lines), submission archive
//! (JSON lines), MOS export and filter report (CSV).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{GroupId, MosEntry, MosTable, Origin, Sequence, SequenceId, Submission, Verdict};
use crate::error::IoError;
use crate::stats::FilterOutcome;

// csv's built-in float parsing is not round-trip exact; go through str::parse.
fn exact_f64<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let s = String::deserialize(d)?;
    s.trim().parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogRow {
    id: String,
    #[serde(default)]
    group_id: String,
    #[serde(deserialize_with = "exact_f64")]
    duration_s: f64,
    width: u32,
    height: u32,
    audio_semantics: String,
    #[serde(deserialize_with = "exact_f64")]
    pq: f64,
    #[serde(deserialize_with = "exact_f64")]
    ce: f64,
    #[serde(deserialize_with = "exact_f64")]
    vq: f64,
    #[serde(default)]
    origin: Option<Origin>,
}

impl From<&Sequence> for CatalogRow {
    fn from(s: &Sequence) -> Self {
        CatalogRow {
            id: s.id.0.clone(),
            group_id: s.group_id.as_ref().map(|g| g.0.clone()).unwrap_or_default(),
            duration_s: s.duration_s,
            width: s.width,
            height: s.height,
            audio_semantics: s.audio_semantics.to_string(),
            pq: s.pseudo_audio_pq,
            ce: s.pseudo_audio_ce,
            vq: s.pseudo_video_q,
            origin: Some(s.origin),
        }
    }
}

impl TryFrom<CatalogRow> for Sequence {
    type Error = IoError;

    fn try_from(r: CatalogRow) -> Result<Self, Self::Error> {
        let seq = Sequence {
            id: SequenceId(r.id),
            group_id: (!r.group_id.trim().is_empty()).then(|| GroupId(r.group_id.trim().to_owned())),
            duration_s: r.duration_s,
            width: r.width,
            height: r.height,
            audio_semantics: r.audio_semantics.parse()?,
            pseudo_audio_pq: r.pq,
            pseudo_audio_ce: r.ce,
            pseudo_video_q: r.vq,
            origin: r.origin.unwrap_or_default(),
        };
        seq.validate()?;
        Ok(seq)
    }
}

pub fn read_catalog_csv<R: Read>(reader: R) -> Result<Vec<Sequence>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<CatalogRow>()
        .map(|row| Sequence::try_from(row?))
        .collect()
}

pub fn write_catalog_csv<W: Write>(writer: W, seqs: &[Sequence]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in seqs {
        wtr.serialize(CatalogRow::from(s))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads JSON lines of any deserializable type; blank lines are skipped.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: Read>(reader: R, path: &str) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::Line {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(writer: W, items: &[T]) -> Result<(), IoError> {
    let mut w = BufWriter::new(writer);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Catalog from `.jsonl`/`.json` (JSON lines) or anything else as CSV.
pub fn load_catalog(path: &Path) -> Result<Vec<Sequence>, IoError> {
    let file = File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => {
            let seqs: Vec<Sequence> = read_jsonl(file, &path.display().to_string())?;
            for s in &seqs {
                s.validate()?;
            }
            Ok(seqs)
        }
        _ => read_catalog_csv(file),
    }
}

pub fn save_catalog(path: &Path, seqs: &[Sequence]) -> Result<(), IoError> {
    let file = File::create(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "json") => write_jsonl(file, seqs),
        _ => write_catalog_csv(file, seqs),
    }
}

pub fn load_submissions(path: &Path) -> Result<Vec<Submission>, IoError> {
    read_jsonl(File::open(path)?, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct MosRow {
    sequence_id: String,
    #[serde(deserialize_with = "exact_f64")]
    mos_avqa: f64,
    #[serde(deserialize_with = "exact_f64")]
    mos_av_vqa: f64,
    #[serde(deserialize_with = "exact_f64")]
    mos_av_aqa: f64,
    #[serde(deserialize_with = "exact_f64")]
    mean_audio_attention_pct: f64,
    n_ratings: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

fn round_to(v: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (v * f).round() / f
}

/// One row per sequence, ordered by id. With `categories`, a trailing
/// `category` column is added.
pub fn write_mos_csv<W: Write>(
    writer: W,
    table: &MosTable,
    categories: Option<&BTreeMap<SequenceId, String>>,
) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    if categories.is_some() {
        wtr.write_record([
            "sequence_id",
            "mos_avqa",
            "mos_av_vqa",
            "mos_av_aqa",
            "mean_audio_attention_pct",
            "n_ratings",
            "category",
        ])?;
    } else {
        wtr.write_record([
            "sequence_id",
            "mos_avqa",
            "mos_av_vqa",
            "mos_av_aqa",
            "mean_audio_attention_pct",
            "n_ratings",
        ])?;
    }
    for (id, e) in table.iter() {
        let mut rec = vec![
            id.0.clone(),
            format!("{}", round_to(e.mos_avqa, 6)),
            format!("{}", round_to(e.mos_av_vqa, 6)),
            format!("{}", round_to(e.mos_av_aqa, 6)),
            format!("{}", round_to(e.mean_audio_attention_pct, 6)),
            e.n_ratings.to_string(),
        ];
        if let Some(cats) = categories {
            rec.push(cats.get(id).cloned().unwrap_or_default());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_mos_csv<R: Read>(reader: R) -> Result<(MosTable, BTreeMap<SequenceId, String>), IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut table = MosTable::default();
    let mut categories = BTreeMap::new();
    for row in rdr.deserialize::<MosRow>() {
        let row = row?;
        let id = SequenceId(row.sequence_id);
        if let Some(c) = row.category.filter(|c| !c.is_empty()) {
            categories.insert(id.clone(), c);
        }
        table.entries.insert(
            id,
            MosEntry {
                mos_avqa: row.mos_avqa,
                mos_av_vqa: row.mos_av_vqa,
                mos_av_aqa: row.mos_av_aqa,
                mean_audio_attention_pct: row.mean_audio_attention_pct,
                n_ratings: row.n_ratings,
            },
        );
    }
    Ok((table, categories))
}

/// One line of the filter report. Submissions rejected at intake have no
/// scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReportRow {
    pub submission_id: String,
    pub srocc_avqa: Option<f64>,
    pub srocc_av_vqa: Option<f64>,
    pub srocc_av_aqa: Option<f64>,
    pub std_avqa: Option<f64>,
    pub std_av_vqa: Option<f64>,
    pub std_av_aqa: Option<f64>,
    pub avg_srocc: Option<f64>,
    pub avg_std: Option<f64>,
    pub verdict: Verdict,
    pub reason: String,
}

impl FilterReportRow {
    pub fn scored(outcome: &FilterOutcome) -> Self {
        let r = |v: f64| Some(round_to(v, 6));
        FilterReportRow {
            submission_id: outcome.submission_id.0.clone(),
            srocc_avqa: r(outcome.per_dimension_srocc[0]),
            srocc_av_vqa: r(outcome.per_dimension_srocc[1]),
            srocc_av_aqa: r(outcome.per_dimension_srocc[2]),
            std_avqa: r(outcome.per_dimension_std[0]),
            std_av_vqa: r(outcome.per_dimension_std[1]),
            std_av_aqa: r(outcome.per_dimension_std[2]),
            avg_srocc: r(outcome.avg_srocc),
            avg_std: r(outcome.avg_std),
            verdict: outcome.verdict(),
            reason: outcome.reject_reason.map(|r| r.name().to_owned()).unwrap_or_default(),
        }
    }

    pub fn unscored(submission_id: &str, verdict: Verdict, reason: impl Into<String>) -> Self {
        FilterReportRow {
            submission_id: submission_id.to_owned(),
            srocc_avqa: None,
            srocc_av_vqa: None,
            srocc_av_aqa: None,
            std_avqa: None,
            std_av_vqa: None,
            std_av_aqa: None,
            avg_srocc: None,
            avg_std: None,
            verdict,
            reason: reason.into(),
        }
    }
}

const FILTER_REPORT_HEADER: [&str; 11] = [
    "submission_id",
    "srocc_avqa",
    "srocc_av_vqa",
    "srocc_av_aqa",
    "std_avqa",
    "std_av_vqa",
    "std_av_aqa",
    "avg_srocc",
    "avg_std",
    "verdict",
    "reason",
];

/// Always writes the header, even with no rows.
pub fn write_filter_report_csv<W: Write>(writer: W, rows: &[FilterReportRow]) -> Result<(), IoError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(FILTER_REPORT_HEADER)?;
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_filter_report_csv<R: Read>(reader: R) -> Result<Vec<FilterReportRow>, IoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AttentionPct, AudioSemantics, RatingRecord, Score, Stage};
    use crate::stats::RejectReason;
    use proptest::prelude::*;

    fn seq(id: &str, group: Option<&str>, sem: AudioSemantics) -> Sequence {
        Sequence {
            id: id.into(),
            group_id: group.map(GroupId::from),
            duration_s: 9.5,
            width: 1280,
            height: 720,
            audio_semantics: sem,
            pseudo_audio_pq: 6.25,
            pseudo_audio_ce: 5.5,
            pseudo_video_q: 0.375,
            origin: Origin::Manual,
        }
    }

    #[test]
    fn catalog_csv_has_documented_columns() {
        let mut buf = Vec::new();
        write_catalog_csv(&mut buf, &[seq("a", Some("g1"), AudioSemantics::SPEECH_SOUND)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "id,group_id,duration_s,width,height,audio_semantics,pq,ce,vq,origin"
        );
        assert!(text.contains("speech;sound"));
    }

    #[test]
    fn pool_csv_with_empty_group_parses() {
        let text = "id,group_id,duration_s,width,height,audio_semantics,pq,ce,vq,origin\n\
                    c1,,10,1920,1080,music,3.1,4.2,0.55,sampled\n\
                    c2,,7.5,1920,1080,speech;music;sound,3.1,4.2,0.55,\n";
        let seqs = read_catalog_csv(text.as_bytes()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert!(seqs[0].group_id.is_none());
        assert_eq!(seqs[1].audio_semantics, AudioSemantics::ALL_THREE);
        assert_eq!(seqs[1].origin, Origin::Sampled);
    }

    #[test]
    fn bad_catalog_rows_are_rejected() {
        let text = "id,group_id,duration_s,width,height,audio_semantics,pq,ce,vq,origin\n\
                    c1,,0,1920,1080,music,3.1,4.2,0.55,sampled\n";
        assert!(read_catalog_csv(text.as_bytes()).is_err());
        let text = "id,group_id,duration_s,width,height,audio_semantics,pq,ce,vq,origin\n\
                    c1,,10,1920,1080,,3.1,4.2,0.55,sampled\n";
        assert!(read_catalog_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn mos_csv_round_trip_with_category() {
        let mut table = MosTable::default();
        table.entries.insert(
            "s1".into(),
            MosEntry {
                mos_avqa: 3.5,
                mos_av_vqa: 3.25,
                mos_av_aqa: 4.0,
                mean_audio_attention_pct: 47.5,
                n_ratings: 4,
            },
        );
        let cats = BTreeMap::from([(SequenceId::from("s1"), "music".to_owned())]);
        let mut buf = Vec::new();
        write_mos_csv(&mut buf, &table, Some(&cats)).unwrap();
        let (back, back_cats) = read_mos_csv(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        assert_eq!(back_cats, cats);
    }

    #[test]
    fn filter_report_rows() {
        let outcome = FilterOutcome {
            submission_id: "sub-1".into(),
            worker_id: "w".into(),
            per_dimension_srocc: [0.9, 0.8, 0.7],
            per_dimension_std: [0.6, 0.7, 0.8],
            avg_srocc: 0.8,
            avg_std: 0.7,
            accepted: false,
            reject_reason: Some(RejectReason::Std),
        };
        let rows = vec![
            FilterReportRow::scored(&outcome),
            FilterReportRow::unscored("sub-2", Verdict::RejectedInvalid, "incomplete_watch"),
        ];
        let mut buf = Vec::new();
        write_filter_report_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("submission_id,srocc_avqa,srocc_av_vqa,srocc_av_aqa,std_avqa"));
        assert!(text.contains("sub-2,,,,,,,,,rejected_invalid,incomplete_watch"));
        assert_eq!(read_filter_report_csv(buf.as_slice()).unwrap(), rows);
    }

    fn arb_sequence() -> impl Strategy<Value = Sequence> {
        (
            "[a-z0-9_-]{1,12}",
            proptest::option::of("[a-z0-9]{1,6}"),
            1u32..200_000,
            1u8..=7,
            -1000i32..1000,
            prop::bool::ANY,
        )
            .prop_map(|(id, group, dur_ms, bits, pq, manual)| Sequence {
                id: SequenceId(id),
                group_id: group.map(GroupId),
                duration_s: f64::from(dur_ms) / 1000.0,
                width: 1920,
                height: 1080,
                audio_semantics: AudioSemantics::from_bits(bits).unwrap(),
                pseudo_audio_pq: f64::from(pq) / 8.0,
                pseudo_audio_ce: f64::from(pq) / 3.0,
                pseudo_video_q: f64::from(pq) * 1e-3,
                origin: if manual { Origin::Manual } else { Origin::Sampled },
            })
    }

    fn arb_submission() -> impl Strategy<Value = Submission> {
        prop::collection::vec((10i16..=50, 10i16..=50, 10i16..=50, 0i16..=100), 0..5).prop_map(|rs| Submission {
            submission_id: "sub-9".into(),
            worker_id: "w-9".into(),
            group_id: "g".into(),
            stage: Stage::Qualification,
            records: rs
                .into_iter()
                .enumerate()
                .map(|(i, (a, b, c, d))| RatingRecord {
                    sequence_id: SequenceId(format!("s{i}")),
                    q1_avqa: Score::from_tenths(a),
                    q2_av_vqa: Score::from_tenths(b),
                    q3_av_aqa: Score::from_tenths(c),
                    q4_audio_attention_pct: AttentionPct::new(d),
                })
                .collect(),
            user_agent: "UA".into(),
            interaction_log: vec![],
            watch_complete: true,
            verdict: Verdict::Accepted,
            env_checks: Some(serde_json::json!({"resolution_ok": true})),
        })
    }

    proptest! {
        #[test]
        fn catalog_round_trips(seqs in prop::collection::vec(arb_sequence(), 0..8)) {
            let mut csv_buf = Vec::new();
            write_catalog_csv(&mut csv_buf, &seqs).unwrap();
            prop_assert_eq!(&read_catalog_csv(csv_buf.as_slice()).unwrap(), &seqs);
            let mut json_buf = Vec::new();
            write_jsonl(&mut json_buf, &seqs).unwrap();
            prop_assert_eq!(&read_jsonl::<Sequence, _>(json_buf.as_slice(), "mem").unwrap(), &seqs);
        }

        #[test]
        fn submissions_round_trip(subs in prop::collection::vec(arb_submission(), 0..4)) {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &subs).unwrap();
            let back: Vec<Submission> = read_jsonl(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back, subs);
        }
    }
}
