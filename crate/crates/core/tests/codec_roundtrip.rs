use packetlm::{detokenize, tokenize_packet, FieldDescriptor, PacketCodec, PacketSchema};
use proptest::prelude::*;

fn canonical(max_digits: usize) -> impl Strategy<Value = String> {
    (1..=max_digits).prop_flat_map(|len| {
        let pattern = if len == 1 { "[0-9]".to_string() } else { format!("[1-9][0-9]{{{}}}", len - 1) };
        proptest::string::string_regex(&pattern).unwrap()
    })
}

fn case() -> impl Strategy<Value = (PacketSchema, Vec<String>, usize)> {
    (prop::collection::vec(1usize..=6, 1..=12), 1usize..=12, 0usize..4).prop_flat_map(|(widths, classes, slack)| {
        let fields: Vec<_> = widths.iter().enumerate().map(|(i, &w)| FieldDescriptor::integer(&format!("f{i}"), w)).collect();
        let worst = widths.iter().sum::<usize>() + widths.len() + 1;
        let schema = PacketSchema::new(fields, (0..classes).map(|c| c.to_string()).collect(), worst + slack, 6).unwrap();
        let values: Vec<_> = widths.iter().map(|&w| canonical(w)).collect();
        (Just(schema), values, 0..classes)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn detokenize_inverts_tokenize((schema, values, label) in case()) {
        let codec = PacketCodec::new(schema);
        let tp = tokenize_packet(&values, label, &codec.schema, &codec.vocab).unwrap();
        prop_assert_eq!(tp.len(), codec.schema.seq_len);
        let (back, l) = detokenize(&tp, &codec.schema, &codec.vocab).unwrap();
        prop_assert_eq!(back, values);
        prop_assert_eq!(l, label);
    }

    #[test]
    fn normalized_raw_integers_round_trip(v in 0u64..100_000, zeros in 0usize..3) {
        let schema = PacketSchema::new(vec![FieldDescriptor::integer("a", 8)], vec!["x".into()], 12, 8).unwrap();
        let codec = PacketCodec::new(schema);
        let raw = format!("{}{v}", "0".repeat(zeros));
        let (back, _) = codec.decode(&codec.encode(&[raw], 0).unwrap()).unwrap();
        prop_assert_eq!(back, vec![v.to_string()]);
    }
}
