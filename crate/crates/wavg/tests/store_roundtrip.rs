//! Property tests for the checkpoint store: arbitrary checkpoints survive a
//! save/load round trip bit-exactly, and directory scans come back sorted.

mod common;

use proptest::prelude::*;

use wavg::store::{
    checkpoint_file_name, load_checkpoint, save_checkpoint, scan_checkpoint_dir, Checkpoint,
    TensorBlock, TensorData,
};

fn arb_data(len: usize) -> BoxedStrategy<TensorData> {
    prop_oneof![
        // Raw bit patterns cover NaN payloads, infinities and signed zeros.
        prop::collection::vec(any::<u32>(), len)
            .prop_map(|bits| TensorData::F32(bits.into_iter().map(f32::from_bits).collect())),
        prop::collection::vec(any::<u64>(), len)
            .prop_map(|bits| TensorData::F64(bits.into_iter().map(f64::from_bits).collect())),
    ]
    .boxed()
}

fn arb_block(index: usize) -> impl Strategy<Value = TensorBlock> {
    // Rank up to 4, extents up to 10, total size capped near 1e4.
    prop::collection::vec(1usize..=10, 0..=4).prop_flat_map(move |shape| {
        let len: usize = shape.iter().product();
        arb_data(len).prop_map(move |data| {
            TensorBlock::new(format!("block{index}"), shape.clone(), data).unwrap()
        })
    })
}

fn arb_checkpoint() -> impl Strategy<Value = Checkpoint> {
    (any::<u32>(), prop::collection::vec(any::<u8>(), 0..=3)).prop_flat_map(|(step, picks)| {
        let blocks: Vec<_> = picks
            .iter()
            .enumerate()
            .map(|(i, _)| arb_block(i))
            .collect();
        blocks.prop_map(move |blocks| {
            let mut ckpt = Checkpoint::new(step as u64);
            for b in blocks {
                ckpt.push_block(b).unwrap();
            }
            ckpt
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(ckpt in arb_checkpoint()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(checkpoint_file_name(ckpt.step()));
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        prop_assert!(loaded.bits_eq(&ckpt));
    }

    #[test]
    fn scan_is_strictly_increasing(steps in prop::collection::btree_set(0u64..=999_999, 0..12)) {
        let dir = tempfile::tempdir().unwrap();
        for &step in &steps {
            let path = dir.path().join(checkpoint_file_name(step));
            save_checkpoint(&Checkpoint::new(step), &path).unwrap();
        }
        let scanned = scan_checkpoint_dir(dir.path()).unwrap();
        prop_assert_eq!(scanned.len(), steps.len());
        for pair in scanned.windows(2) {
            prop_assert!(pair[0].0 < pair[1].0);
        }
    }
}

#[test]
fn shape_compatibility_is_an_equivalence_relation() {
    let make = |v: f64| {
        let mut c = Checkpoint::new(0);
        c.push_block(TensorBlock::from_f64("a", vec![2], vec![v, v]).unwrap())
            .unwrap();
        c.push_block(TensorBlock::from_f32("b", vec![], vec![v as f32]).unwrap())
            .unwrap();
        c
    };
    let x = make(1.0);
    let y = make(2.0);
    let z = make(3.0);
    // Reflexive, symmetric, transitive on a compatible family.
    assert!(x.shape_compatible(&x));
    assert!(x.shape_compatible(&y) && y.shape_compatible(&x));
    assert!(x.shape_compatible(&y) && y.shape_compatible(&z) && x.shape_compatible(&z));
}
