"""Operator entry points.

Exit codes: 0 ok, 1 validation failure, 2 runtime failure. Every command
is a view over the same operations the HTTP admin surface exposes.
"""

from __future__ import annotations

import json
import sys
from datetime import datetime
from pathlib import Path

import click

from .budget import micro_to_display, parse_amount
from .config import build_gateway, load_config
from .errors import ConfigInvalid, GatewayError
from .registry import card_from_dict, validate_card


@click.group()
def main():
    """Governed multi-provider AI gateway."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Path to the gateway config file.")
@click.option("--host", default=None, help="Override the configured listen host.")
@click.option("--port", default=None, type=int, help="Override the configured listen port.")
def serve(config_path, host, port):
    """Run the gateway until terminated; in-flight requests settle on shutdown."""
    try:
        config = load_config(config_path)
        gateway = build_gateway(config)
    except ConfigInvalid as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    except GatewayError as exc:
        click.echo(f"startup failed: {exc}", err=True)
        sys.exit(2)

    from .config import start_card_watcher
    from .server import create_app
    import uvicorn

    if config.card_reload_seconds > 0 and config.card_dir is not None:
        start_card_watcher(gateway, config.card_dir, config.card_reload_seconds,
                           eu_members=config.eu_member_states)

    listen_host, _, listen_port = config.listen.rpartition(":")
    app = create_app(gateway)
    try:
        uvicorn.run(app, host=host or listen_host or "127.0.0.1",
                    port=port or int(listen_port or 8080), log_level="info")
    except SystemExit:
        raise
    except OSError as exc:  # port in use and friends
        click.echo(f"cannot listen: {exc}", err=True)
        sys.exit(2)


@main.command("validate-card")
@click.argument("path", type=click.Path(exists=True))
def validate_card_cmd(path):
    """Validate one card file or every *.json card in a directory."""
    target = Path(path)
    files = sorted(target.glob("*.json")) if target.is_dir() else [target]
    total_violations = 0
    for card_path in files:
        try:
            card = card_from_dict(json.loads(card_path.read_text(encoding="utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            click.echo(f"{card_path}: unreadable ({exc})")
            total_violations += 1
            continue
        report = validate_card(card)
        if report:
            click.echo(f"{card_path}: INVALID")
            for violation in report:
                click.echo(f"  - {violation}")
            total_violations += len(report)
        else:
            click.echo(f"{card_path}: ok ({card.model_id} v{card.card_version})")
    click.echo(f"{len(files)} cards, {total_violations} violations")
    sys.exit(1 if total_violations else 0)


def _gateway_from(config_path):
    try:
        return build_gateway(load_config(config_path))
    except ConfigInvalid as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)


@main.command("issue-key")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--principal", required=True)
@click.option("--models", default="*", help="Comma-separated model ids, or * for all.")
@click.option("--scope", required=True, help="Budget scope id for the key.")
@click.option("--expires", default=None, help="ISO timestamp; omit for no expiry.")
def issue_key(config_path, principal, models, scope, expires):
    """Issue a scoped key; the secret is printed exactly once."""
    gateway = _gateway_from(config_path)
    allowed = None if models.strip() == "*" else [m.strip() for m in models.split(",")]
    try:
        key, secret = gateway.issue_key(
            principal, allowed, scope,
            datetime.fromisoformat(expires) if expires else None, actor="cli")
    except GatewayError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"key_id: {key.key_id}")
    click.echo(f"secret: {secret}")
    click.echo("store the secret now; it is not retrievable later")


@main.command("revoke-key")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.argument("key_id")
def revoke_key(config_path, key_id):
    """Revoke a key; the next authentication with it fails."""
    gateway = _gateway_from(config_path)
    try:
        gateway.revoke_key(key_id, actor="cli")
    except GatewayError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"revoked {key_id}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--group-by", "group_by", required=True,
              type=click.Choice(["user", "model", "provider", "period"]))
@click.option("--period", default=None, help="Restrict to one YYYY-MM period.")
def report(config_path, group_by, period):
    """Print a spend report from the persisted ledger evidence."""
    gateway = _gateway_from(config_path)
    rows = gateway.ledger.spend_report(group_by, period)
    if not rows:
        click.echo("no spend recorded")
        return
    width = max(len(row["key"]) for row in rows)
    click.echo(f"{'KEY'.ljust(width)}  {'TOTAL':>10}  REQUESTS")
    for row in rows:
        click.echo(f"{row['key'].ljust(width)}  {micro_to_display(row['total']):>10}  "
                   f"{row['request_count']}")


@main.command("top-up")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.argument("scope_id")
@click.argument("amount")
@click.option("--justification", required=True)
def top_up(config_path, scope_id, amount, justification):
    """Raise a scope's cap with a justified top-up."""
    gateway = _gateway_from(config_path)
    try:
        new_cap = gateway.top_up(scope_id, parse_amount(amount), justification, actor="cli")
    except GatewayError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"{scope_id} cap is now {micro_to_display(new_cap)}")


if __name__ == "__main__":
    main()
