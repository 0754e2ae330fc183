//! Encodes a message signature, splits a payload into datagram segments and
//! reassembles them after shuffling and duplicating a few.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cclo::wire::{
    decode_header, encode_header, segment_message, FeedOutcome, MessageSignature, MsgType, ReassemblyState, Segment,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sig = MessageSignature::eager(0, 3, 5, 42, 17, 10_000);
    let bytes = encode_header(&sig)?;
    println!("signature ({} bytes):", bytes.len());
    for row in bytes.chunks(16) {
        println!("  {}", row.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "));
    }
    assert_eq!(decode_header(&bytes)?, sig);

    let init = MessageSignature { msg_type: MsgType::RndzInit, remote_addr: 0x0000_0007_0000_0000, payload_len: 0, ..sig };
    println!("rendezvous INIT carries remote_addr {:#x}", decode_header(&encode_header(&init)?)?.remote_addr);

    let payload: Vec<u8> = (0..sig.payload_len).map(|i| (i % 251) as u8).collect();
    let mut segments = segment_message(9, &sig, &payload, 1472)?;
    println!("{} segments of at most 1472 bytes", segments.len());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dups: Vec<Segment> = segments.choose_multiple(&mut rng, 3).cloned().collect();
    segments.extend(dups);
    segments.shuffle(&mut rng);

    let mut state = ReassemblyState::new(sig, 9);
    for seg in &segments {
        let wire = [seg.encode_subheader().as_slice(), &seg.body].concat();
        let outcome = state.feed(&Segment::decode(&wire)?)?;
        println!("  offset {:>5} len {:>4} -> {:>5} bytes {:?}", seg.offset, seg.seg_len, state.bytes_done(), outcome);
        if outcome == FeedOutcome::Complete {
            break;
        }
    }
    assert_eq!(state.into_payload(), payload);
    println!("payload reassembled intact");
    Ok(())
}
