use std::ffi::{CStr, CString};
use std::ptr;

use avemo_core::model::{AvModel, ModelConfig};
use avemo_core::preprocess::mel::encode_wav_bytes;
use avemo_ffi::*;

fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { avemo_string_free(s) };
    out
}

fn tone(seconds: f32) -> Vec<u8> {
    let n = (16_000.0 * seconds) as usize;
    let samples: Vec<f32> = (0..n).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect();
    encode_wav_bytes(&samples, 16_000).unwrap()
}

fn open_engine(dir: &std::path::Path) -> *mut AvemoEngine {
    let path = CString::new(dir.to_str().unwrap()).unwrap();
    let config = CString::new(r#"{"max_new_tokens": 8, "generation_reserve": 32}"#).unwrap();
    let mut engine = ptr::null_mut();
    let s = unsafe { avemo_engine_open(path.as_ptr(), config.as_ptr(), &mut engine) };
    assert_eq!(s, AvemoStatus::Ok, "{:?}", unsafe {
        CStr::from_ptr(avemo_last_error())
    });
    engine
}

#[test]
fn session_round_trip_through_c_api() {
    let dir = tempfile::tempdir().unwrap();
    AvModel::new(ModelConfig::tiny()).unwrap().save(dir.path()).unwrap();
    let engine = open_engine(dir.path());

    let mut health = ptr::null_mut();
    assert_eq!(unsafe { avemo_engine_health(engine, &mut health) }, AvemoStatus::Ok);
    assert!(take(health).contains("\"ok\""));

    let mut id = ptr::null_mut();
    assert_eq!(
        unsafe { avemo_session_create(engine, ptr::null(), &mut id) },
        AvemoStatus::Ok
    );
    let id = CString::new(take(id)).unwrap();

    let wav = tone(0.5);
    let transcript = CString::new("hello there").unwrap();
    let mut reply = ptr::null_mut();
    let s = unsafe {
        avemo_session_post_turn(
            engine,
            id.as_ptr(),
            wav.as_ptr(),
            wav.len(),
            ptr::null(),
            0,
            transcript.as_ptr(),
            &mut reply,
        )
    };
    assert_eq!(s, AvemoStatus::Ok, "{:?}", unsafe {
        CStr::from_ptr(avemo_last_error())
    });
    let reply: serde_json::Value = serde_json::from_str(&take(reply)).unwrap();
    assert_eq!(reply["round_index"], 1);

    let mut before = ptr::null_mut();
    assert_eq!(
        unsafe { avemo_session_transcript(engine, id.as_ptr(), &mut before) },
        AvemoStatus::Ok
    );
    let before = take(before);

    // A corrupt frame archive fails the turn and leaves the history alone.
    let junk = [1u8, 2, 3, 4];
    let mut reply = ptr::null_mut();
    let s = unsafe {
        avemo_session_post_turn(
            engine,
            id.as_ptr(),
            wav.as_ptr(),
            wav.len(),
            junk.as_ptr(),
            junk.len(),
            ptr::null(),
            &mut reply,
        )
    };
    assert_eq!(s, AvemoStatus::InvalidMedia);
    assert!(reply.is_null());
    let mut after = ptr::null_mut();
    assert_eq!(
        unsafe { avemo_session_transcript(engine, id.as_ptr(), &mut after) },
        AvemoStatus::Ok
    );
    assert_eq!(before, take(after));

    assert_eq!(unsafe { avemo_session_delete(engine, id.as_ptr()) }, AvemoStatus::Ok);
    assert_eq!(
        unsafe { avemo_session_delete(engine, id.as_ptr()) },
        AvemoStatus::UnknownSession
    );
    unsafe { avemo_engine_free(engine) };
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut engine = ptr::null_mut();
    let s = unsafe { avemo_engine_open(path.as_ptr(), ptr::null(), &mut engine) };
    assert_ne!(s, AvemoStatus::Ok);
    assert!(engine.is_null());
    assert!(!avemo_last_error().is_null());
}

#[test]
fn bad_service_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    AvModel::new(ModelConfig::tiny()).unwrap().save(dir.path()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let config = CString::new(r#"{"max_new_tokens": 300}"#).unwrap();
    let mut engine = ptr::null_mut();
    let s = unsafe { avemo_engine_open(path.as_ptr(), config.as_ptr(), &mut engine) };
    assert_eq!(s, AvemoStatus::Config);
}
