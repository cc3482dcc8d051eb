//! One-shot HTTP responders for exercising the remote backend clients.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

pub struct CapturedRequest {
    pub path: String,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

/// Serves exactly one request with `status`, `content_type` and `body`,
/// returning the URL and a receiver for the captured request.
pub fn serve_once(status: u16, content_type: &str, body: Vec<u8>) -> (String, mpsc::Receiver<CapturedRequest>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/endpoint", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    let content_type = content_type.to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
        let mut len = 0usize;
        let mut req_type = None;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "content-type" => req_type = Some(v.trim().to_string()),
                    _ => {}
                }
            }
        }
        let mut req_body = vec![0; len];
        reader.read_exact(&mut req_body).unwrap();
        let _ = tx.send(CapturedRequest { path, content_type: req_type, body: req_body });
        let mut stream = stream;
        let head = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        );
        stream.write_all(head.as_bytes()).unwrap();
        stream.write_all(&body).unwrap();
    });
    (url, rx)
}

/// A URL nothing is listening on.
pub fn dead_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/endpoint")
}
