use std::fs;

use proptest::prelude::*;
use timebin::io::{read_tags, write_tags, TagFormat};
use timebin::Error;
use timebin_core::{Channel, Party, TagStream, TimeTag};

fn arb_stream(party: Party) -> impl Strategy<Value = TagStream> {
    prop::collection::vec((-1_000_000_000_000i64..1_000_000_000_000, 0u8..4), 0..300).prop_map(move |v| {
        let tags = v
            .into_iter()
            .map(|(t, c)| TimeTag::new(t, Channel::from_code(c).unwrap()))
            .collect();
        TagStream::from_unsorted(party, 0, tags).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn files_round_trip(s in arb_stream(Party::Bob)) {
        let tmp = tempfile::tempdir().unwrap();
        for format in [TagFormat::Binary, TagFormat::Csv] {
            let path = tmp.path().join(format!("t.{}", format.extension()));
            write_tags(&s, &path, format).unwrap();
            prop_assert_eq!(TagFormat::from_path(&path), format);
            let back = read_tags(&path, format, Party::Bob).unwrap();
            prop_assert_eq!(&back, &s);
            // Re-encoding is byte-identical.
            let again = tmp.path().join(format!("u.{}", format.extension()));
            write_tags(&back, &again, format).unwrap();
            prop_assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        }
    }
}

#[test]
fn zero_byte_files_are_empty_streams() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("empty.ftag");
    fs::write(&path, b"").unwrap();
    for format in [TagFormat::Binary, TagFormat::Csv] {
        let s = read_tags(&path, format, Party::Alice).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.party(), Party::Alice);
    }
}

#[test]
fn binary_header_keeps_party_and_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("b.ftag");
    let s = TagStream::new(Party::Bob, -42, vec![TimeTag::new(1, Channel::TsupMinus)]).unwrap();
    write_tags(&s, &path, TagFormat::Binary).unwrap();
    let back = read_tags(&path, TagFormat::Binary, Party::Alice).unwrap();
    assert_eq!((back.party(), back.epoch()), (Party::Bob, -42));
}

#[test]
fn errors_name_the_file_and_position() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.ftag");
    let e = read_tags(&missing, TagFormat::Binary, Party::Alice).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("missing.ftag"));

    let dup = tmp.path().join("dup.csv");
    fs::write(&dup, "channel,timestamp_ps\nTOA_V,7\nTOA_V,7\n").unwrap();
    let e = read_tags(&dup, TagFormat::Csv, Party::Alice).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("dup.csv") && msg.contains("line 3") && msg.contains("duplicate"), "{msg}");
}
