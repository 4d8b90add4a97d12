use super::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("cf-{i:04}")).collect()
}

fn readers(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("reader{}", i + 1)).collect()
}

fn read(reader: &str, output: &str, present: &[&str], notes: &str) -> ReadRecord {
    let mut labels = vec![ReadLabel::Absent; 8];
    for p in present {
        labels[READ_FINDINGS.iter().position(|f| f == p).unwrap()] = ReadLabel::Present;
    }
    ReadRecord {
        reader_id: reader.into(),
        output_id: output.into(),
        labels,
        notes: notes.into(),
        artificial_flag: Some(false),
        extra_anomaly_flag: Some(false),
    }
}

#[test]
fn disjoint_assignment_partitions() {
    let all = ids(800);
    let s = assign_reads(&all, &readers(2), 400, 7, AssignMode::Disjoint).unwrap();
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|x| x.items.len() == 400));
    let mut union: Vec<&String> = s.iter().flat_map(|x| x.items.iter().map(|i| &i.output_id)).collect();
    union.sort();
    union.dedup();
    assert_eq!(union.len(), 800);
    assert_eq!(
        s[0].items.iter().map(|i| i.display_id).collect::<Vec<_>>(),
        (1..=400).collect::<Vec<_>>()
    );
    assert_eq!(s, assign_reads(&all, &readers(2), 400, 7, AssignMode::Disjoint).unwrap());
    assert_ne!(s, assign_reads(&all, &readers(2), 400, 8, AssignMode::Disjoint).unwrap());

    let one = assign_reads(&ids(1), &readers(1), 1, 0, AssignMode::Disjoint).unwrap();
    assert_eq!(one[0].items.len(), 1);
    assert!(matches!(
        assign_reads(&ids(799), &readers(2), 400, 7, AssignMode::Disjoint),
        Err(ReaderError::Argument(_))
    ));
    assert!(assign_reads(&ids(500), &readers(2), 400, 7, AssignMode::Overlapping).is_ok());
}

#[test]
fn labels_are_confined() {
    let mut m = BTreeMap::new();
    m.insert("cardiomegaly".to_string(), 1u8);
    let l = validate_labels(&m).unwrap();
    assert_eq!(l[0], ReadLabel::Present);
    assert!(l[1..].iter().all(|x| *x == ReadLabel::Absent));
    m.insert("edema".into(), 3);
    assert!(matches!(validate_labels(&m), Err(ReaderError::Validation(_))));
    let mut m = BTreeMap::new();
    m.insert("no_such_thing".to_string(), 1u8);
    assert!(validate_labels(&m).is_err());
    assert!(serde_json::from_str::<ReadLabel>("3").is_err());
    assert_eq!(serde_json::from_str::<ReadLabel>("2").unwrap(), ReadLabel::Unsure);
}

#[test]
fn highlights_never_set_flags() {
    let h = highlight_notes("Looks artificial, extra device");
    let kinds: Vec<(&str, FlagKind)> = h.iter().map(|x| (x.keyword.as_str(), x.suggests)).collect();
    assert_eq!(
        kinds,
        vec![
            ("artificial", FlagKind::Artificial),
            ("extra", FlagKind::ExtraAnomaly),
            ("device", FlagKind::ExtraAnomaly)
        ]
    );
    assert_eq!(&"Looks artificial, extra device"[h[0].start..h[0].end], "artificial");
    assert!(highlight_notes("lines are fine").is_empty(), "whole words only");
}

#[test]
fn store_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let store = ReaderStore::open(tmp.path()).unwrap();
    let all = ids(4);
    let sessions = assign_reads(&all, &readers(2), 2, 1, AssignMode::Disjoint).unwrap();
    let images: HashMap<String, String> = all.iter().map(|i| (i.clone(), format!("/img/{i}.png"))).collect();
    let infos = store.install(&sessions, &images).unwrap();
    let sid = &infos[0].session_id;
    assert_eq!(sid.len(), 32);

    let next = store.next(sid).unwrap().unwrap();
    assert_eq!(next.display_id, 1);
    let mut sub = ReadSubmission {
        display_id: 1,
        labels: [("cardiomegaly".to_string(), 1u8)].into_iter().collect(),
        notes: String::new(),
        revision: false,
    };
    let ack = store.record_read(sid, &sub).unwrap();
    assert_eq!(ack.progress, Progress { completed: 1, total: 2 });
    assert!(matches!(store.record_read(sid, &sub), Err(ReaderError::Conflict(_))));
    sub.revision = true;
    sub.notes = "looks artificial, extra device".into();
    assert_eq!(store.record_read(sid, &sub).unwrap().revision, 1);
    assert_eq!(store.progress(sid).unwrap().completed, 1);
    sub.display_id = 9;
    assert!(matches!(store.record_read(sid, &sub), Err(ReaderError::NotFound(_))));
    assert!(matches!(store.progress("nope"), Err(ReaderError::NotFound(_))));
    sub.display_id = 2;
    sub.labels.insert("edema".into(), 3);
    assert!(matches!(store.record_read(sid, &sub), Err(ReaderError::Validation(_))));

    let queue = store.adjudication_queue().unwrap();
    assert_eq!(queue.len(), 1);
    assert_eq!(queue[0].highlights.len(), 3);
    let reads = store.reads().unwrap();
    assert_eq!(reads[0].artificial_flag, None, "notes never auto-set flags");
    assert!(matches!(realism_summary(&reads), Err(ReaderError::PendingAdjudication(1))));
    store
        .adjudicate(
            &reads[0].reader_id,
            &reads[0].output_id,
            AdjudicationDecision {
                artificial: true,
                extra_anomaly: true,
            },
        )
        .unwrap();
    assert!(store.adjudication_queue().unwrap().is_empty());
    let s = realism_summary(&store.reads().unwrap()).unwrap();
    assert_eq!(s.overall.realistic_fraction, 0.0);

    let mut csv = vec![];
    store.export_session_csv(sid, &mut csv).unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(text.lines().count(), 3, "header plus one row per assigned scan");
    let rows = read_session_csv(&csv[..]).unwrap();
    let mut again = vec![];
    write_session_csv(&mut again, &rows).unwrap();
    assert_eq!(csv, again);

    // reopening sees the same state and the audit log has every mutation
    drop(store);
    let store = ReaderStore::open(tmp.path()).unwrap();
    assert_eq!(store.sessions().unwrap().len(), 2);
    let audit = std::fs::read_to_string(tmp.path().join("audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 2 + 2 + 1);
}

#[test]
fn reader_payloads_are_blinded() {
    let tmp = tempfile::tempdir().unwrap();
    let store = ReaderStore::open(tmp.path()).unwrap();
    let all = vec!["cf-00000000deadbeef".to_string()];
    let sessions = assign_reads(&all, &readers(1), 1, 0, AssignMode::Disjoint).unwrap();
    let images = [(all[0].clone(), "/data/edema/scan123.png".to_string())].into_iter().collect();
    let sid = store.install(&sessions, &images).unwrap()[0].session_id.clone();
    let payloads = [
        serde_json::to_string(&store.next(&sid).unwrap()).unwrap(),
        serde_json::to_string(&store.progress(&sid).unwrap()).unwrap(),
        serde_json::to_string(
            &store
                .record_read(
                    &sid,
                    &ReadSubmission {
                        display_id: 1,
                        ..Default::default()
                    },
                )
                .unwrap(),
        )
        .unwrap(),
    ];
    for p in payloads {
        for secret in ["deadbeef", "scan123", "/data", "seed", "prompt"] {
            assert!(!p.contains(secret), "{p} leaks {secret}");
        }
    }
}

fn prompts(pairs: &[(&str, &str)]) -> HashMap<String, FindingKey> {
    pairs.iter().map(|(o, p)| (o.to_string(), FindingKey::new(*p))).collect()
}

#[test]
fn cooccurrence_hand_count() {
    let mut reads = vec![];
    let mut map = vec![];
    let names: Vec<String> = (0..10).map(|i| format!("o{i}")).collect();
    for (i, n) in names.iter().enumerate() {
        let present: &[&str] = if i < 9 { &["edema"] } else { &["pneumonia"] };
        reads.push(read("r", n, present, ""));
        map.push((n.as_str(), "edema"));
    }
    let m = compute_read_cooccurrence(&reads, &prompts(&map), UnsurePolicy::AsAbsent).unwrap();
    assert_eq!(m.get("edema", "edema"), Some(0.9));
    assert_eq!(m.get("edema", "pneumonia"), Some(0.1));
    assert!(m.get("hernia", "hernia").unwrap().is_nan());
    assert_eq!(m.meta["unsure_policy"], "as_absent");

    let mut unsure = reads.clone();
    for r in &mut unsure {
        r.labels = vec![ReadLabel::Unsure; 8];
    }
    let z = compute_read_cooccurrence(&unsure, &prompts(&map), UnsurePolicy::AsAbsent).unwrap();
    assert!(z.row("edema").unwrap().iter().all(|v| *v == 0.0));
    let ex = compute_read_cooccurrence(&unsure, &prompts(&map), UnsurePolicy::Exclude).unwrap();
    assert!(ex.row("edema").unwrap().iter().all(|v| v.is_nan()));

    reads.push(read("r", "ghost", &[], ""));
    match compute_read_cooccurrence(&reads, &prompts(&map), UnsurePolicy::AsAbsent) {
        Err(ReaderError::Orphans(o)) => assert_eq!(o, vec!["ghost".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn realism_fractions() {
    let mut reads: Vec<ReadRecord> = (0..800)
        .map(|i| read(if i % 2 == 0 { "a" } else { "b" }, &format!("o{i}"), &[], ""))
        .collect();
    for r in reads.iter_mut().take(55) {
        r.artificial_flag = Some(true);
    }
    for r in reads.iter_mut().skip(100).take(20) {
        r.extra_anomaly_flag = Some(true);
    }
    let s = realism_summary(&reads).unwrap();
    assert_eq!(s.overall.realistic_fraction, 0.93125);
    assert_eq!(s.overall.extra_anomaly_fraction, 0.025);
    assert_eq!(s.per_reader.len(), 2);
    assert_eq!(s.per_reader[0].artificial + s.per_reader[1].artificial, 55);
    assert!(matches!(realism_summary(&[]), Err(ReaderError::NoReads)));
}

#[test]
fn admin_csv_round_trip() {
    let mut reads = vec![read("a", "o1", &["edema"], "ok, \"quoted\""), read("b", "o2", &[], "")];
    reads[1].labels[3] = ReadLabel::Unsure;
    reads[0].artificial_flag = None;
    let mut buf = vec![];
    write_reads_csv(&mut buf, &reads).unwrap();
    let back = read_reads_csv(&buf[..]).unwrap();
    assert_eq!(back, reads);
    let mut dup = buf.clone();
    dup.extend_from_slice(String::from_utf8(buf.clone()).unwrap().lines().nth(1).unwrap().as_bytes());
    dup.push(b'\n');
    assert!(matches!(read_reads_csv(&dup[..]), Err(ReaderError::Conflict(_))));
}

#[test]
fn session_csv_joins_through_mapping() {
    let session = ReaderSession {
        reader_id: "a".into(),
        items: vec![
            SessionItem {
                display_id: 1,
                output_id: "o1".into(),
            },
            SessionItem {
                display_id: 2,
                output_id: "o2".into(),
            },
        ],
    };
    let rows = vec![
        SessionCsvRow {
            display_id: 1,
            labels: vec![Some(ReadLabel::Present), None, None, None, None, None, None, None],
            notes: String::new(),
        },
        SessionCsvRow {
            display_id: 2,
            labels: vec![None; 8],
            notes: String::new(),
        },
    ];
    let reads = reads_from_session_csv(&rows, &session).unwrap();
    assert_eq!(reads.len(), 1, "unread row skipped");
    assert_eq!(reads[0].output_id, "o1");
    assert_eq!(reads[0].label("cardiomegaly"), Some(ReadLabel::Present));
}
