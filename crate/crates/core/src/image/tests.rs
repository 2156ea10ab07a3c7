use super::*;
use crate::instrument::instrument_program;
use crate::isa::{parse_assembly, Program};
use crate::vm::{ExecStatus, RunEnd, VmInstance};

fn build(src: &str) -> Program {
    instrument_program(&parse_assembly(src).unwrap()).unwrap().0
}

const HELLO: &str = ".method main 0 1\n CONST \"hello\"\n STORE 0\n PRINT 0\n RETURN\n.end";

const CALLS: &str = "
.method main 0 2
    CONST 3
    STORE 0
    INVOKE down 0 -> 1
    PRINT 1
    RETURN
.end
.method down 1 3
    LOAD 0
    CONST 0
    EQ
    JMPIF base
    LOAD 0
    CONST 1
    SUB
    STORE 1
    INVOKE down 1 -> 2
    LOAD 2
    CONST 10
    MUL
    LOAD 0
    ADD
    STORE 2
    PRINT 2
    RETURN 2
base:
    CONST 0
    STORE 2
    RETURN 2
.end";

fn suspended_at(p: &Program, k: u64) -> VmInstance {
    let mut vm = VmInstance::load(p).unwrap();
    vm.suspend_at_checkpoint(k);
    assert_eq!(vm.run(10_000).unwrap(), RunEnd::Parked);
    vm
}

#[test]
fn hello_image_header_and_shape() {
    let p = build(HELLO);
    let mut vm = VmInstance::load(&p).unwrap();
    vm.exec_suspend().unwrap();
    vm.run(10).unwrap();
    let img = capture(&vm, "e1").unwrap();
    assert_eq!(img.threads.len(), 1);
    assert_eq!(img.threads[0].frames.len(), 1);
    assert_eq!(img.threads[0].frames[0].apc, -1);
    let bytes = encode_image(&img);
    assert_eq!(&bytes[..6], &[0x44, 0x47, 0x45, 0x49, 0x01, 0x00]);
    assert_eq!(decode_image(&bytes).unwrap(), img);
}

#[test]
fn capture_requires_suspension() {
    let p = build(HELLO);
    let vm = VmInstance::load(&p).unwrap();
    assert_eq!(capture(&vm, "e").unwrap_err(), CaptureError::NotSuspended);
    let mut vm = VmInstance::load(&p).unwrap();
    vm.exec_suspend().unwrap();
    assert_eq!(capture(&vm, "e").unwrap_err(), CaptureError::NotAllParked(0));
}

#[test]
fn nested_frames_round_trip() {
    let p = build(CALLS);
    let mut oracle = VmInstance::load(&p).unwrap();
    oracle.run(10_000).unwrap();
    let total = oracle.stats().checkpoints;
    assert!(total >= 5);
    for k in 1..=total {
        let vm = suspended_at(&p, k);
        let img = capture(&vm, "e").unwrap();
        let bytes = encode_image(&img);
        let back = decode_image(&bytes).unwrap();
        assert_eq!(encode_image(&back), bytes);
        let mut restored = restore(&p, &back).unwrap();
        let (a, b) = (vm.inspect(), restored.inspect());
        assert_eq!(a.threads, b.threads, "k = {k}");
        assert_eq!(a.heap, b.heap);
        assert_eq!(b.status, ExecStatus::Suspended);
        restored.exec_resume().unwrap();
        restored.run(10_000).unwrap();
        let mut joined = vm.output_lines();
        joined.extend(restored.output_lines());
        assert_eq!(joined, oracle.output_lines(), "k = {k}");
    }
}

#[test]
fn apc_out_of_range_is_rejected() {
    let p = build(CALLS);
    let vm = suspended_at(&p, 3);
    let mut img = capture(&vm, "e").unwrap();
    img.threads[0].frames[0].apc = 99;
    assert_eq!(
        restore(&p, &img).unwrap_err().rule(),
        Some(ImageRule::ApcOutOfRange)
    );
}

#[test]
fn wrong_program_is_rejected() {
    let p = build(CALLS);
    let img = capture(&suspended_at(&p, 2), "e").unwrap();
    assert_eq!(
        restore(&build(HELLO), &img).unwrap_err(),
        RestoreError::HashMismatch
    );
}

#[test]
fn truncation_and_tampering_are_detected() {
    let p = build(CALLS);
    let bytes = encode_image(&capture(&suspended_at(&p, 4), "e").unwrap());
    assert!(decode_image(&bytes[..bytes.len() - 1]).unwrap_err().is_truncated());
    for i in 0..bytes.len() {
        let mut b = bytes.clone();
        b[i] ^= 0x01;
        assert!(decode_image(&b).is_err(), "flip at {i} went unnoticed");
    }
}
