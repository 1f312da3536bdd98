"""Command-line surface: a thin client over the inference service.

Every subcommand sends one request to the service (in-process by default,
remote with ``--server``) and writes the returned report. Reports are CSV
unless ``--json`` is given; numeric fields carry 9 significant digits.
"""

from __future__ import annotations

import base64
import json
import os
import sys
from pathlib import Path

import click

from evsparse.client import ServiceClient, ServiceError

__all__ = ["main"]


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _request(ctx, method: str, path: str, payload: dict | None = None) -> dict:
    try:
        return ctx.obj.request(method, path, payload)
    except ServiceError as exc:
        _fail(exc.detail)
    except Exception as exc:  # connection failures and the like
        _fail(str(exc))


def _write_report(response: dict, out: str, as_json: bool) -> None:
    if as_json:
        data = {k: v for k, v in response.items() if k != "csv"}
        Path(out).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    else:
        Path(out).write_text(response["csv"], encoding="utf-8")


def _model_payload(model: str) -> dict:
    return {"model_b64": base64.b64encode(Path(model).read_bytes()).decode("ascii")}


def _events_payload(events: str) -> dict:
    return {"events_text": Path(events).read_text(encoding="utf-8")}


@click.group()
@click.option("--server", envvar="EVSPARSE_SERVER", default=None,
              help="Service URL; when omitted the service runs in-process.")
@click.pass_context
def main(ctx, server):
    """Event-driven sparse convolutional inference."""
    ctx.obj = ServiceClient(server)


@main.command("gen-events")
@click.option("--frames", required=True,
              help="Directory of .npy brightness frames, or synthetic:<ramp|moving_edge|moving_disk>.")
@click.option("--threshold", type=float, required=True, help="Contrast threshold C > 0.")
@click.option("-o", "--output", required=True, help="Event file to write.")
@click.option("--width", type=int, default=64, show_default=True)
@click.option("--height", type=int, default=48, show_default=True)
@click.option("--steps", type=int, default=40, show_default=True)
@click.option("--dt", "dt_us", type=int, default=1000, show_default=True, help="Frame spacing in µs.")
@click.pass_context
def gen_events(ctx, frames, threshold, output, width, height, steps, dt_us):
    """Synthesize an event stream from brightness frames."""
    payload = {"threshold": threshold, "width": width, "height": height, "steps": steps, "dt_us": dt_us}
    if frames.startswith("synthetic:"):
        payload["synthetic"] = frames.split(":", 1)[1]
    else:
        payload["frames_dir"] = str(Path(frames).resolve())
    response = _request(ctx, "POST", "/gen-events", payload)
    Path(output).write_text(response["events_text"], encoding="utf-8")
    click.echo(f"wrote {response['count']} events ({response['width']}x{response['height']}) to {output}")


@main.command("gen-model")
@click.option("-o", "--output", required=True, help="Model file to write.")
@click.option("--template", type=click.Choice(["vgg13", "small"]), default="vgg13", show_default=True)
@click.option("--seed", type=int, default=None, help="Weight seed; defaults to $ASYNC_SPARSE_SEED.")
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--blocks", type=int, default=2, show_default=True, help="Blocks of the small template.")
@click.option("--base-channels", type=int, default=4, show_default=True)
@click.option("--repr", "representation", type=click.Choice(["histogram", "queue"]),
              default="histogram", show_default=True)
@click.option("--fc-out", type=int, default=10, show_default=True)
@click.option("--window", type=int, default=25000, show_default=True)
@click.pass_context
def gen_model(ctx, output, template, seed, width, height, blocks, base_channels, representation, fc_out, window):
    """Write a random model for a named architecture template."""
    if seed is None and os.environ.get("ASYNC_SPARSE_SEED"):
        seed = int(os.environ["ASYNC_SPARSE_SEED"])
    payload = {
        "seed": seed, "template": template, "width": width, "height": height, "blocks": blocks,
        "base_channels": base_channels, "representation": representation, "fc_out": fc_out, "window": window,
    }
    response = _request(ctx, "POST", "/models/random", payload)
    Path(output).write_bytes(base64.b64decode(response["model_b64"]))
    click.echo(f"wrote {response['name']} model (seed {response['seed']}) to {output}")


@main.command("run")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--events", required=True, type=click.Path(exists=True))
@click.option("--repr", "representation", type=click.Choice(["histogram", "queue"]), default=None,
              help="Defaults to the model's metadata.")
@click.option("--mode", type=click.Choice(["dense", "sparse", "async"]), default="async", show_default=True)
@click.option("--window", type=int, default=None, help="Sliding window W; defaults to the model's metadata (25000).")
@click.option("--batch", type=int, default=1, show_default=True, help="Events per async update; 0 = one update.")
@click.option("-o", "--output", required=True, help="Report file.")
@click.option("--json", "as_json", is_flag=True, help="Write JSON instead of CSV.")
@click.pass_context
def run(ctx, model, events, representation, mode, window, batch, output, as_json):
    """Run one stream through a model in a single execution mode."""
    payload = {**_model_payload(model), **_events_payload(events), "mode": mode,
               "representation": representation, "window": window, "batch": batch}
    response = _request(ctx, "POST", "/run", payload)
    _write_report(response, output, as_json)
    click.echo(f"{mode}: {response['updates']} updates, {response['total_flops']} FLOPs -> {output}")


@main.command("compare")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--events", required=True, type=click.Path(exists=True))
@click.option("--repr", "representation", type=click.Choice(["histogram", "queue"]), default=None)
@click.option("--window", type=int, default=None)
@click.option("--batch", type=int, default=1, show_default=True)
@click.option("-o", "--output", required=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def compare(ctx, model, events, representation, window, batch, output, as_json):
    """Run dense, sparse, and async modes; report deviations and FLOPs."""
    payload = {**_model_payload(model), **_events_payload(events),
               "representation": representation, "window": window, "batch": batch}
    response = _request(ctx, "POST", "/compare", payload)
    _write_report(response, output, as_json)
    click.echo(
        f"max |async-sparse| deviation {response['max_abs_deviation']} "
        f"(rel {response['max_rel_deviation']}) over {response['updates']} updates -> {output}"
    )


@main.command("flops")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--events", type=click.Path(exists=True), default=None,
              help="Required for sparse and async modes.")
@click.option("--mode", type=click.Choice(["dense", "sparse", "async"]), default="dense", show_default=True)
@click.option("--repr", "representation", type=click.Choice(["histogram", "queue"]), default=None)
@click.option("--window", type=int, default=None)
@click.option("--batch", type=int, default=1, show_default=True)
@click.option("-o", "--output", required=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def flops(ctx, model, events, mode, representation, window, batch, output, as_json):
    """Per-layer FLOP table for one execution mode."""
    payload = {**_model_payload(model), "mode": mode, "representation": representation,
               "window": window, "batch": batch}
    if events:
        payload.update(_events_payload(events))
    response = _request(ctx, "POST", "/flops", payload)
    _write_report(response, output, as_json)
    click.echo(f"{mode}: total {response['total_flops']} FLOPs -> {output}")


@main.command("fractal")
@click.option("--events", required=True, type=click.Path(exists=True))
@click.option("--repr", "representation", type=click.Choice(["histogram", "queue"]),
              default="histogram", show_default=True)
@click.option("--radii", default=None, help="Comma-separated patch radii, e.g. 1,2,4,8.")
@click.option("--center", default=None, help="Center pixel as x,y; defaults to the active centroid.")
@click.option("--window", type=int, default=25000, show_default=True)
@click.option("-o", "--output", required=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def fractal(ctx, events, representation, radii, center, window, output, as_json):
    """Fractal dimension of a stream's active-site pattern."""
    payload = {**_events_payload(events), "representation": representation, "window": window}
    if radii:
        payload["radii"] = [int(r) for r in radii.split(",") if r.strip()]
    if center:
        parts = center.split(",")
        if len(parts) != 2:
            _fail(f"--center expects x,y, got {center!r}")
        payload["center"] = (int(parts[0]), int(parts[1]))
    response = _request(ctx, "POST", "/fractal", payload)
    _write_report(response, output, as_json)
    click.echo(f"slope {response['slope']} over radii {response['radii']} -> {output}")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the inference service."""
    import uvicorn

    uvicorn.run("evsparse.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
