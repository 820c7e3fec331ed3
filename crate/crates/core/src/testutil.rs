//! Helpers shared by unit tests.

/// Bitwise CRC-32 (IEEE, reflected, poly 0xEDB88320), written out longhand
/// as an oracle for the table-driven implementation the code uses.
pub fn crc32_reference(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}

#[test]
fn reference_crc_check_value() {
    assert_eq!(crc32_reference(b"123456789"), 0xcbf4_3926);
}
