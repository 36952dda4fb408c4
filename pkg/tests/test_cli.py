import csv
import socket
import threading

from fbttr.cli import EXIT_CONFIG, EXIT_DATA, main
from fbttr.data import load_npz
from fbttr.model_io import load_model


def run_cli(*argv):
    return main(list(argv))


def test_synth_writes_npz_and_csv(tmp_path):
    out = tmp_path / "data.npz"
    code = run_cli("synth", "--out", str(out), "--shape", "40,6", "--blocks", "1",
                   "--snr-db", "20", "--seed", "5")
    assert code == 0
    assert out.exists()
    assert out.with_suffix(".csv").exists()
    ds = load_npz(out)
    assert ds.x.shape == (40, 6)


def test_synth_higher_order_npz_only(tmp_path):
    out = tmp_path / "data.npz"
    code = run_cli("synth", "--out", str(out), "--shape", "30x5x4", "--blocks", "1",
                   "--snr-db", "inf", "--seed", "1")
    assert code == 0
    ds = load_npz(out)
    assert ds.x.shape == (30, 5, 4)
    assert not out.with_suffix(".csv").exists()


def test_fit_and_predict_round_trip(tmp_path):
    data = tmp_path / "data.npz"
    run_cli("synth", "--out", str(data), "--shape", "50x5x4", "--blocks", "1",
            "--snr-db", "25", "--seed", "2")
    out = tmp_path / "run"
    code = run_cli("fit", "--data", str(data), "--blocks", "1",
                   "--grid-snr", "15:35:20", "--grid-tau", "97:100:3",
                   "--out", str(out))
    assert code == 0
    model_path = out / "model.fbttr"
    assert model_path.exists()
    model = load_model(model_path)
    assert model.n_blocks == 1
    assert model.normalization is not None

    pred_path = tmp_path / "pred.csv"
    code = run_cli("predict", "--model", str(model_path), "--data", str(data),
                   "--out", str(pred_path))
    assert code == 0
    with open(pred_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["prediction_0"]
    assert len(rows) == 51


def test_fit_missing_file_exit_code(tmp_path):
    code = run_cli("fit", "--data", str(tmp_path / "nope.csv"), "--response", "y")
    assert code == EXIT_DATA


def test_fit_csv_requires_response(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b\n1,2\n3,4\n", encoding="utf-8")
    code = run_cli("fit", "--data", str(p))
    assert code == EXIT_CONFIG


def test_federate_client_unreachable_server_exit_code(tmp_path):
    from fbttr.cli import EXIT_PROTOCOL

    data = tmp_path / "d.npz"
    run_cli("synth", "--out", str(data), "--shape", "20x4", "--blocks", "1",
            "--snr-db", "20", "--seed", "0")
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    dead_port = sock.getsockname()[1]
    sock.close()
    code = run_cli("federate", "--role", "client",
                   "--connect", f"127.0.0.1:{dead_port}", "--data", str(data))
    assert code == EXIT_PROTOCOL


def test_experiment_cli_with_config(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "\n".join([
            "mode=centralized",
            "synth_shape=60x5x4",
            "synth_blocks=1",
            "synth_snr_db=25",
            "blocks=1",
            "grid_snr=15:35:20",
            "grid_tau=97:100:3",
            "seeds=1",
            "seed=3",
            "test_blocks=3",
            f"out={tmp_path / 'out'}",
        ]) + "\n",
        encoding="utf-8",
    )
    code = run_cli("experiment", "--config", str(cfg))
    assert code == 0
    assert (tmp_path / "out" / "metrics.csv").exists()


def test_experiment_cli_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("mode=warp_drive\n", encoding="utf-8")
    assert run_cli("experiment", "--config", str(cfg)) == EXIT_CONFIG


def test_report_merges_metrics(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    base = ["experiment", "--mode", "centralized", "--blocks", "1"]
    cfg_lines = [
        "synth_shape=60x5x4", "synth_blocks=1", "synth_snr_db=25",
        "grid_snr=15:35:20", "grid_tau=97:100:3", "seeds=1", "seed=3",
        "test_blocks=3",
    ]
    for out, mode in ((out_a, "centralized"), (out_b, "federated")):
        cfg = tmp_path / f"{out.name}.cfg"
        cfg.write_text("\n".join(cfg_lines + [f"mode={mode}", "clients=2", f"out={out}"]) + "\n",
                       encoding="utf-8")
        assert run_cli("experiment", "--config", str(cfg)) == 0
    report_path = tmp_path / "merged.json"
    code = run_cli("report", str(out_a / "metrics.csv"), str(out_b / "metrics.csv"),
                   "--out", str(report_path))
    assert code == 0
    text = report_path.read_text()
    assert "centralized" in text and "federated" in text
    assert "comparisons" in text


def test_federate_cli_over_sockets(tmp_path):
    data_files = []
    for i in (0, 1):
        p = tmp_path / f"client{i}.npz"
        run_cli("synth", "--out", str(p), "--shape", "30x4x3", "--blocks", "1",
                "--snr-db", "25", "--seed", str(10 + i))
        data_files.append(p)

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()

    out = tmp_path / "served"
    results = {}

    def server():
        results["code"] = run_cli(
            "federate", "--role", "server", "--listen", f"127.0.0.1:{port}",
            "--clients", "2", "--blocks", "1",
            "--grid-snr", "15:35:20", "--grid-tau", "97:100:3",
            "--round-timeout", "60", "--out", str(out),
        )

    st = threading.Thread(target=server)
    st.start()
    import time

    time.sleep(0.3)
    client_threads = []
    codes = {}

    def client(i, path):
        codes[i] = run_cli(
            "federate", "--role", "client", "--connect", f"127.0.0.1:{port}",
            "--data", str(path), "--round-timeout", "60",
        )

    for i, path in enumerate(data_files):
        t = threading.Thread(target=client, args=(i, path))
        t.start()
        client_threads.append(t)
        time.sleep(0.05)
    st.join(timeout=120)
    for t in client_threads:
        t.join(timeout=120)
    assert results["code"] == 0
    assert codes == {0: 0, 1: 0}
    model = load_model(out / "model.fbttr")
    assert model.n_blocks == 1
