"""Reading and writing networks, delay parameters, demand and observations.

Units on disk follow the field names: ``length`` m, ``free_flow_speed``
m/s, ``capacity`` and ``demand_vph`` veh/h, keys ending in ``_s`` seconds.
See ``docs/network_format.md`` for the full layout.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .calibration import ObservationSet, SignalSpec, StopSpec
from .delays import SECONDS_PER_HOUR, delay_from_dict, delay_to_dict
from .errors import NetworkError
from .network import (Control, Intersection, Link, LinkKind, Network, ODPair, Route,
                      insert_phantom_links)

DEMAND_COLUMNS = ("od_id", "origin", "destination", "demand_vph")
BPR_COLUMNS = ("flow_vph", "travel_time_s")
QUEUE_COLUMNS = ("flow_vph", "throughput_per_cycle", "avg_delay_s")


def dumps(data) -> str:
    """Canonical JSON: sorted keys, fixed indent, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_json(path, data) -> None:
    write_text(path, dumps(data))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# networks

def _intersection_from_dict(d: Mapping) -> Intersection:
    control = Control(d["control"])
    spec = None
    if control == Control.SIGNALIZED:
        spec = SignalSpec(D=float(d["cycle_s"]), L_red=float(d["red_s"]),
                          n=int(d["vehicles_per_green"]))
    elif control == Control.STOP_SIGN:
        spec = StopSpec(w=float(d["stop_delay_s"]))
    return Intersection(d["node"], control, spec)


def _intersection_to_dict(inter: Intersection) -> dict:
    out = {"node": inter.node, "control": inter.control.value}
    if isinstance(inter.spec, SignalSpec):
        out.update(cycle_s=inter.spec.D, red_s=inter.spec.L_red,
                   vehicles_per_green=inter.spec.n)
    elif isinstance(inter.spec, StopSpec):
        out["stop_delay_s"] = inter.spec.w
    return out


def network_from_dict(data: Mapping) -> Network:
    """Build and validate a network; phantom links are inserted if missing."""
    try:
        links, delays = [], {}
        for d in data["links"]:
            kind = LinkKind(d.get("kind", "physical"))
            if kind == LinkKind.PHYSICAL:
                bpr = d.get("bpr", {})
                link = Link(id=d["id"], kind=kind, tail=d["tail"], head=d["head"],
                            length=float(d["length"]),
                            free_flow_speed=float(d["free_flow_speed"]),
                            capacity=float(d["capacity"]),
                            bpr=(float(bpr.get("a", 0.15)), float(bpr.get("b", 4.0))))
            else:
                link = Link(id=d["id"], kind=kind, tail=d["tail"], head=d["head"],
                            control=Control(d["control"]), approach=d.get("approach"),
                            exit=d.get("exit"))
            links.append(link)
            if "delay" in d:
                delays[link.id] = delay_from_dict(d["delay"])
        inters = {}
        for d in data.get("intersections", []):
            inter = _intersection_from_dict(d)
            inters[inter.node] = inter
        ods = [ODPair(d["id"], d["origin"], d["destination"], float(d.get("demand_vph", 0.0)))
               for d in data["od_pairs"]]
        routes = [Route(d["id"], d["od_pair"], tuple(d["links"])) for d in data["routes"]]
        net = Network(tuple(data["nodes"]), links, ods, routes, inters, delays)
    except (KeyError, TypeError) as exc:
        raise NetworkError(f"malformed network description: {exc!r}") from None
    return insert_phantom_links(net).validate()


def network_to_dict(network: Network) -> dict:
    links = []
    for link in network.links:
        d = {"id": link.id, "kind": link.kind.value, "tail": link.tail, "head": link.head}
        if link.is_phantom:
            d.update(control=link.control.value, approach=link.approach, exit=link.exit)
        else:
            d.update(length=link.length, free_flow_speed=link.free_flow_speed,
                     capacity=link.capacity, bpr={"a": link.bpr[0], "b": link.bpr[1]})
        if link.id in network.delays:
            d["delay"] = delay_to_dict(network.delays[link.id])
        links.append(d)
    return {
        "nodes": list(network.nodes),
        "links": links,
        "intersections": [_intersection_to_dict(i) for _, i in sorted(network.intersections.items())],
        "od_pairs": [{"id": o.id, "origin": o.origin, "destination": o.destination,
                      "demand_vph": o.demand} for o in network.od_pairs],
        "routes": [{"id": r.id, "od_pair": r.od_pair, "links": list(r.links)}
                   for r in network.routes],
    }


def load_network(path) -> Network:
    try:
        data = read_json(path)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: invalid JSON ({exc})") from None
    return network_from_dict(data)


def save_network(path, network: Network) -> None:
    write_json(path, network_to_dict(network))


# delay parameters

def delays_to_dict(delays: Mapping, diagnostics: Optional[Mapping] = None) -> dict:
    out = {"delays": {k: delay_to_dict(v) for k, v in sorted(delays.items())}}
    if diagnostics is not None:
        out["diagnostics"] = {k: {kk: _clean(vv) for kk, vv in v.items()}
                              for k, v in sorted(diagnostics.items())}
    return out


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def load_delays(path) -> dict:
    data = read_json(path)
    try:
        return {k: delay_from_dict(v) for k, v in data["delays"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError(f"{path}: malformed delay file ({exc})") from None


def attach_delays(network: Network, delays: Mapping) -> Network:
    for lid in delays:
        network.link(lid)
    return network.with_delays(delays)


# demand

def load_demand(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DEMAND_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise NetworkError(f"{path}: missing demand columns {sorted(missing)}")
        rows = []
        for row in reader:
            try:
                rows.append({"od_id": row["od_id"], "origin": row["origin"],
                             "destination": row["destination"],
                             "demand_vph": float(row["demand_vph"])})
            except ValueError:
                raise NetworkError(f"{path}: bad demand value {row['demand_vph']!r}") from None
    return rows


def apply_demand(network: Network, rows) -> Network:
    """Set OD demands from demand rows; origins and destinations must match."""
    demands = {}
    for row in rows:
        od = network.od_pair(row["od_id"])
        if (od.origin, od.destination) != (row["origin"], row["destination"]):
            raise NetworkError(f"demand row {row['od_id']}: endpoints "
                               f"{row['origin']}->{row['destination']} do not match the network")
        demands[od.id] = row["demand_vph"]
    return network.with_demands(demands)


def save_demand(path, network: Network) -> None:
    lines = [",".join(DEMAND_COLUMNS)]
    for o in network.od_pairs:
        lines.append(f"{o.id},{o.origin},{o.destination},{o.demand!r}")
    write_text(path, "\n".join(lines) + "\n")


# observations

def _cycle_for(network: Network, key: str) -> Optional[float]:
    link = network.link(key)
    inter = network.intersections.get(link.head)
    return inter.cycle if inter is not None else None


def load_observations(directory, network: Network) -> dict:
    """Read every ``<link_id>.csv`` in ``directory``.

    Travel-time files become BPR samples; throughput files become queue
    samples for the phantom link (or approach link) named by the file.
    """
    out = {}
    for path in sorted(Path(directory).glob("*.csv")):
        key = path.stem
        network.link(key)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = set(reader.fieldnames or ())
            rows = list(reader)
        try:
            flow = np.array([float(r["flow_vph"]) for r in rows])
            density = (np.array([float(r["density_veh_per_km"]) for r in rows])
                       if "density_veh_per_km" in cols else None)
            if set(BPR_COLUMNS) <= cols:
                tt = np.array([float(r["travel_time_s"]) for r in rows]) / SECONDS_PER_HOUR
                out[key] = ObservationSet(key, flow, travel_time=tt, density=density,
                                          length=network.link(key).length)
            elif set(QUEUE_COLUMNS) <= cols:
                thr = np.array([float(r["throughput_per_cycle"]) for r in rows])
                dl = np.array([float(r["avg_delay_s"]) for r in rows]) / SECONDS_PER_HOUR
                out[key] = ObservationSet(key, flow, throughput=thr, avg_delay=dl,
                                          density=density, window=SECONDS_PER_HOUR,
                                          cycle=_cycle_for(network, key))
            else:
                raise NetworkError(f"{path}: unrecognised observation columns {sorted(cols)}")
        except (KeyError, ValueError) as exc:
            raise NetworkError(f"{path}: malformed observation file ({exc})") from None
    return out


def save_observations(directory, observations: Mapping[str, ObservationSet]) -> None:
    for key, obs in sorted(observations.items()):
        if obs.kind == "bpr":
            header = list(BPR_COLUMNS)
            cols = [obs.flow, obs.travel_time * SECONDS_PER_HOUR]
        else:
            header = list(QUEUE_COLUMNS)
            cols = [obs.flow, obs.throughput, obs.avg_delay * SECONDS_PER_HOUR]
        if obs.density is not None:
            header.append("density_veh_per_km")
            cols.append(obs.density)
        lines = [",".join(header)]
        lines += [",".join(repr(float(v)) for v in row) for row in zip(*cols)]
        write_text(Path(directory) / f"{key}.csv", "\n".join(lines) + "\n")


def write_csv(path, header, rows) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    write_text(path, "\n".join(lines) + "\n")
