use ibunet_core::npy::{data_offset, read_npy, write_npy};
use ibunet_core::NpyArray;
use proptest::prelude::*;

#[test]
fn nine_channel_stack_data_section_size() {
    let data: Vec<f32> = (0..9 * 256 * 256).map(|k| (k % 977) as f32 * 0.5).collect();
    let bytes = write_npy(&NpyArray::new(vec![9, 256, 256], data));
    let off = data_offset(&bytes).unwrap();
    assert_eq!(off % 64, 0);
    assert_eq!(bytes.len() - off, 2_359_296);
    let back = read_npy(&bytes).unwrap();
    assert_eq!(back.shape, vec![9, 256, 256]);
    assert_eq!(write_npy(&back), bytes);
}

proptest! {
    #[test]
    fn write_read_write_is_byte_identical(shape in prop::collection::vec(1usize..6, 1..4), seed in any::<u32>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|k| f32::from_bits((seed as u64 * 2654435761 + k as u64 * 40503) as u32 & 0x3fff_ffff)).collect();
        let bytes = write_npy(&NpyArray::new(shape.clone(), data.clone()));
        let back = read_npy(&bytes).unwrap();
        prop_assert_eq!(&back.shape, &shape);
        prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(write_npy(&back), bytes);
    }
}
