"""Command-line entry points.

  fedgate serve --config cfg.json            run the gateway (wall clock)
  fedgate mint-token --config cfg.json ...   print a bearer token for the mock IdP
  fedgate bench ... / bench ...              load generator (see bench subcommands)

Bench subcommands:
  bench run   --config cfg.json --model M --n 1000 --rate inf|R \
              --mode online|batch --seed S --out report.json
  bench sweep --config cfg.json --model M --rates 1,5,10,20,inf \
              --instances 1,2,3,4 --n 200 --out sweep.json
"""

from __future__ import annotations

import argparse
import asyncio
import json
import math
import sys

from .bench import (
    AsgiTarget,
    HttpTarget,
    WorkloadSpec,
    run_bench,
    run_sweep,
    write_csv,
    write_sweep_csv,
)
from .config import load_config_file
from .simclock import run_virtual
from .stack import ServiceStack


def _parse_rate(value: str) -> float:
    if value in ("inf", "infinite", "max"):
        return math.inf
    return float(value)


def _add_bench_subcommands(sub: argparse._SubParsersAction) -> None:
    run_p = sub.add_parser("run", help="run one benchmark")
    run_p.add_argument("--config", required=True, help="service config JSON")
    run_p.add_argument("--model", required=True)
    run_p.add_argument("--n", type=int, default=1000)
    run_p.add_argument("--rate", type=_parse_rate, default=math.inf,
                       help="req/s, or 'inf' to submit everything at once")
    run_p.add_argument("--mode", choices=("online", "batch"), default="online")
    run_p.add_argument("--kind", choices=("chat", "completion"), default="chat")
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--prompt-tokens", type=int, default=32)
    run_p.add_argument("--output-tokens", type=int, default=64)
    run_p.add_argument("--length-dist", choices=("fixed", "lognormal"), default="fixed")
    run_p.add_argument("--stream", action="store_true")
    run_p.add_argument("--pool", type=int, default=512, help="client connection pool size")
    run_p.add_argument("--target", default="inproc",
                       help="'inproc' (virtual clock) or a gateway base URL")
    run_p.add_argument("--token", default=None, help="bearer token for a URL target")
    run_p.add_argument("--out", default="report.json")
    run_p.set_defaults(func=_cmd_bench_run)

    sweep_p = sub.add_parser("sweep", help="rate x instance-count grid")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--model", required=True)
    sweep_p.add_argument("--rates", default="inf",
                         help="comma list, e.g. 1,5,10,20,inf")
    sweep_p.add_argument("--instances", default="1",
                         help="comma list, e.g. 1,2,3,4")
    sweep_p.add_argument("--n", type=int, default=200)
    sweep_p.add_argument("--kind", choices=("chat", "completion"), default="chat")
    sweep_p.add_argument("--seed", type=int, default=0)
    sweep_p.add_argument("--prompt-tokens", type=int, default=32)
    sweep_p.add_argument("--output-tokens", type=int, default=64)
    sweep_p.add_argument("--out", default="sweep.json")
    sweep_p.set_defaults(func=_cmd_bench_sweep)


def _cmd_bench_run(args: argparse.Namespace) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        config_data = json.load(fh)
    spec = WorkloadSpec(
        n_requests=args.n,
        model=args.model,
        rate=args.rate,
        mode=args.mode,
        kind=args.kind,
        seed=args.seed,
        prompt_tokens=args.prompt_tokens,
        output_tokens=args.output_tokens,
        length_dist=args.length_dist,
        stream=args.stream,
        pool_size=args.pool,
    )

    if args.target == "inproc":
        config = load_config_file(args.config)

        async def main():
            stack = ServiceStack(config)
            await stack.start()
            try:
                return await run_bench(spec, AsgiTarget(stack.app), stack.mint())
            finally:
                await stack.stop()

        # the scenario's clock mode decides whether simulated time is used
        report = run_virtual(main()) if config.clock == "virtual" else asyncio.run(main())
    else:
        if not args.token:
            print("--token is required for URL targets", file=sys.stderr)
            return 2

        async def main():
            target = HttpTarget(args.target)
            try:
                return await run_bench(spec, target, args.token)
            finally:
                await target.aclose()

        report = asyncio.run(main())

    report.write_json(args.out)
    csv_path = args.out.rsplit(".", 1)[0] + ".csv"
    write_csv(csv_path, [report])
    print(f"requests:     {report.n_success}/{report.n_requests} ok"
          f" ({report.n_errors} errors){' ABORTED' if report.aborted else ''}")
    print(f"throughput:   {report.request_throughput:.3f} req/s")
    print(f"token rate:   {report.output_token_throughput:.1f} tok/s")
    print(f"median e2e:   {report.median_e2e_latency_s:.3f} s")
    print(f"duration:     {report.duration_s:.3f} s")
    print(f"reports:      {args.out}, {csv_path}")
    return 0


def _cmd_bench_sweep(args: argparse.Namespace) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        config_data = json.load(fh)
    rates = [_parse_rate(r) for r in args.rates.split(",") if r]
    instances = [int(i) for i in args.instances.split(",") if i]
    spec = WorkloadSpec(
        n_requests=args.n,
        model=args.model,
        kind=args.kind,
        seed=args.seed,
        prompt_tokens=args.prompt_tokens,
        output_tokens=args.output_tokens,
    )
    rows = run_virtual(run_sweep(config_data, spec, rates, instances))
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, default=str)
    csv_path = args.out.rsplit(".", 1)[0] + ".csv"
    write_sweep_csv(csv_path, rows)
    for row in rows:
        rep = row.get("report")
        if rep:
            print(f"instances={row['instances']} rate={row['rate']}: "
                  f"{rep['request_throughput']:.2f} req/s, "
                  f"{rep['output_token_throughput']:.0f} tok/s, "
                  f"median {rep['median_e2e_latency_s']:.2f} s")
        else:
            print(f"instances={row['instances']} rate={row['rate']}: "
                  f"ERROR {row.get('error')}")
    print(f"reports: {args.out}, {csv_path}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    config = load_config_file(args.config)
    config.clock = "wall"
    stack = ServiceStack(config)
    host = args.host or config.gateway.host
    port = args.port or config.gateway.port

    async def main():
        await stack.start()
        admin = stack.mint("bootstrap-admin", {config.auth.admin_group})
        print(f"gateway listening on http://{host}:{port}")
        print(f"bootstrap admin token: {admin}")
        print(f"self-service tokens:   POST http://{host}:{port}/idp/token "
              '{"subject": "you", "groups": []}')
        server = uvicorn.Server(uvicorn.Config(
            stack.app, host=host, port=port, log_level="info",
        ))
        try:
            await server.serve()
        finally:
            await stack.stop()

    asyncio.run(main())
    return 0


def _cmd_mint(args: argparse.Namespace) -> int:
    # Tokens live in one stack's in-memory IdP: this mints into a fresh stack
    # for scripting demos. Against a running `fedgate serve`, POST /idp/token.
    config = load_config_file(args.config)
    stack = ServiceStack(config)

    async def main():
        return stack.mint(args.subject, set(args.group or []), args.ttl)

    print(run_virtual(main()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgate")
    sub = parser.add_subparsers(dest="command", required=True)

    serve_p = sub.add_parser("serve", help="run the gateway under uvicorn")
    serve_p.add_argument("--config", required=True)
    serve_p.add_argument("--host", default=None)
    serve_p.add_argument("--port", type=int, default=None)
    serve_p.set_defaults(func=_cmd_serve)

    mint_p = sub.add_parser("mint-token", help="mint a token for the mock IdP")
    mint_p.add_argument("--config", required=True)
    mint_p.add_argument("--subject", default="user")
    mint_p.add_argument("--group", action="append")
    mint_p.add_argument("--ttl", type=float, default=48 * 3600.0)
    mint_p.set_defaults(func=_cmd_mint)

    bench_p = sub.add_parser("bench", help="benchmark harness")
    bench_sub = bench_p.add_subparsers(dest="bench_command", required=True)
    _add_bench_subcommands(bench_sub)
    return parser


def build_bench_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_bench_subcommands(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def bench_main(argv: list[str] | None = None) -> int:
    args = build_bench_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
