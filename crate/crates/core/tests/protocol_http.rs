mod common;

use std::time::Duration;

use autolab::composition::{enumerate_grid, axes_to_electrolyte, Electrolyte, GridSpec};
use autolab::protocol::*;
use autolab::virtual_lab::{LabConfig, LabState};
use common::{arb_request, arb_response};
use proptest::prelude::*;

fn instrument(seed: u64) -> Instrument {
    Instrument::new(LabState::new(LabConfig::default(), seed).unwrap())
}

fn client(h: &ServerHandle) -> HttpTransport {
    HttpTransport::new(h.url(), Duration::from_secs(10), 3)
}

fn grid_requests(campaign: &str, n: usize) -> Vec<ExperimentRequest> {
    let grid = enumerate_grid(&GridSpec::default()).unwrap();
    (0..n)
        .map(|k| {
            let e = axes_to_electrolyte(&grid.point((k * 97) % grid.len())).unwrap();
            ExperimentRequest::new(campaign, k as u64 + 1, e)
        })
        .collect()
}

#[test]
fn baseline_over_http() {
    let server = spawn_server(instrument(3), "127.0.0.1:0").unwrap();
    let c = client(&server);
    let r = submit_experiment(&c, &ExperimentRequest::new("c", 1, Electrolyte::new(0.3, 0.0, 0.7, 1.1).unwrap())).unwrap();
    assert_eq!(r.status, MeasurementStatus::Ok);
    let k = r.conductivity_ms_cm.unwrap();
    assert!((k - 9.8).abs() < 0.06 * 9.8, "{k}");
    assert_eq!(c.status().unwrap().measurements, 1);
    let h: Health = ureq::get(format!("{}/health", server.url())).call().unwrap().body_mut().read_json().unwrap();
    assert_eq!(h.status, "ok");
}

#[test]
fn malformed_bodies_get_machine_readable_400() {
    let server = spawn_server(instrument(3), "127.0.0.1:0").unwrap();
    let url = format!("{}/experiment", server.url());
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    for body in [
        "not json",
        r#"{"campaign_id":"c","experiment_id":1,"composition":{"w_ec":0.3,"w_dmc":0.3,"w_emc":0.3,"molality":1.0}}"#,
        r#"{"campaign_id":"c","experiment_id":1,"composition":{"w_ec":0.3,"w_dmc":0.0,"w_emc":0.7,"molality":1.0},"replicates":1}"#,
    ] {
        let mut resp = agent.post(&url).header("content-type", "application/json").send(body).unwrap();
        assert_eq!(resp.status().as_u16(), 400);
        let e: ErrorBody = resp.body_mut().read_json().unwrap();
        assert_eq!(e.status, "invalid_request");
        assert!(!e.reason.is_empty());
    }
    let c = client(&server);
    assert_eq!(c.status().unwrap().measurements, 0);
    let bad = ExperimentRequest::new("c", 1, Electrolyte { molality: 2.5, ..Electrolyte::new(0.3, 0.0, 0.7, 1.0).unwrap() });
    assert!(matches!(c.submit(&bad), Err(ProtocolError::Rejected { .. })));
}

#[test]
fn http_and_loopback_are_equivalent() {
    let reqs = grid_requests("eq", 8);
    let server = spawn_server(instrument(21), "127.0.0.1:0").unwrap();
    let http = client(&server);
    let loopback = LoopbackTransport::new(instrument(21));
    for r in &reqs {
        assert_eq!(http.submit(r).unwrap(), loopback.submit(r).unwrap());
    }
    assert_eq!(http.status().unwrap(), loopback.status().unwrap());
}

#[test]
fn seeded_servers_replay_identically() {
    let reqs = grid_requests("replay", 6);
    let stream = |seed| {
        let server = spawn_server(instrument(seed), "127.0.0.1:0").unwrap();
        let c = client(&server);
        reqs.iter().map(|r| c.submit(r).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(stream(5), stream(5));
    assert_ne!(stream(5), stream(6));
}

#[test]
fn retransmission_does_not_remeasure() {
    let server = spawn_server(instrument(1), "127.0.0.1:0").unwrap();
    let c = client(&server);
    let req = grid_requests("idem", 1).remove(0);
    let first = c.submit(&req).unwrap();
    for _ in 0..5 {
        assert_eq!(c.submit(&req).unwrap(), first);
    }
    assert_eq!(c.status().unwrap().measurements, 1);
}

#[test]
fn concurrent_clients_are_serialized() {
    // Identical compositions under distinct ids: the k-th executed request must
    // produce exactly the k-th response of a sequential run.
    let n = 12;
    let comp = Electrolyte::new(0.4, 0.6, 0.0, 0.9).unwrap();
    let reqs: Vec<_> = (1..=n).map(|i| ExperimentRequest::new("fifo", i, comp)).collect();
    let sequential: Vec<_> = {
        let mut inst = instrument(9);
        reqs.iter().map(|r| inst.handle(r).unwrap()).collect()
    };
    let server = spawn_server(instrument(9), "127.0.0.1:0").unwrap();
    let url = server.url();
    let handles: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|r| {
            let url = url.clone();
            std::thread::spawn(move || HttpTransport::new(url, Duration::from_secs(10), 3).submit(&r).unwrap())
        })
        .collect();
    let mut got: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let strip = |mut r: ExperimentResponse| {
        r.experiment_id = 0;
        serde_json::to_string(&r).unwrap()
    };
    let mut want: Vec<String> = sequential.into_iter().map(strip).collect();
    let mut have: Vec<String> = got.drain(..).map(strip).collect();
    want.sort();
    have.sort();
    assert_eq!(want, have);
    let st = client(&server).status().unwrap();
    assert_eq!(st.measurements, n);
    assert_eq!(st.clock_s, n as f64 * 4500.0);
}

#[test]
fn unreachable_endpoint_exhausts_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let c = HttpTransport::new(format!("http://{addr}"), Duration::from_secs(2), 2);
    match c.submit(&grid_requests("x", 1)[0]) {
        Err(ProtocolError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn request_codec_round_trip(r in arb_request()) {
        let text = serde_json::to_string(&r).unwrap();
        let back: ExperimentRequest = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert!(back.validate().is_ok());
    }

    #[test]
    fn response_codec_round_trip(r in arb_response()) {
        let text = serde_json::to_string(&r).unwrap();
        let back: ExperimentResponse = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert!(back.validate().is_ok());
    }
}
