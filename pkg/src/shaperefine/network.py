"""Refinement network: silhouette encoder, vertex pooling, graph refiner, heads."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .camera import CameraPose, project_points

CONF_MIN = 1e-4
MAX_PARAMETERS = 1_200_000
# shrinks the initial displacement output so a fresh model barely moves the mesh
DISPLACEMENT_INIT_GAIN = 0.02


class ResidualBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=2):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1)
        self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        h = F.relu(self.conv1(x))
        return F.relu(self.conv2(h) + self.shortcut(x))


class SilhouetteEncoder(nn.Module):
    """Residual CNN emitting 256- and 512-channel maps at strides 8 and 16."""

    def __init__(self, widths=(16, 32, 64, 128), channels=(256, 512)):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Conv2d(1, w0, 7, stride=2, padding=3)
        self.stage1 = ResidualBlock(w0, w1)
        self.stage2 = ResidualBlock(w1, w2)
        self.stage3 = ResidualBlock(w2, w3)
        self.proj1 = nn.Conv2d(w2, channels[0], 1)
        self.proj2 = nn.Conv2d(w3, channels[1], 1)

    def forward(self, x):
        h = F.relu(self.stem(x))
        h = self.stage1(h)
        h8 = self.stage2(h)
        h16 = self.stage3(h8)
        return [F.relu(self.proj1(h8)), F.relu(self.proj2(h16))]


class GraphAdjacency:
    """Symmetric-normalized adjacency with self loops, ``D^-1/2 (A + I) D^-1/2``."""

    def __init__(self, edges: np.ndarray, n_vertices: int):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        loops = np.arange(n_vertices)
        rows = np.concatenate([edges[:, 0], edges[:, 1], loops])
        cols = np.concatenate([edges[:, 1], edges[:, 0], loops])
        deg = np.bincount(rows, minlength=n_vertices).astype(np.float64)
        w = 1.0 / np.sqrt(deg[rows] * deg[cols])
        order = np.lexsort((cols, rows))
        self.rows = torch.from_numpy(rows[order])
        self.cols = torch.from_numpy(cols[order])
        self.weights = torch.from_numpy(w[order])
        self.n = n_vertices

    @classmethod
    def from_mesh(cls, mesh):
        return cls(mesh.edges, mesh.n_vertices)

    def dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        np.add.at(A, (self.rows.numpy(), self.cols.numpy()), self.weights.numpy())
        return A

    def apply(self, h: torch.Tensor) -> torch.Tensor:
        w = self.weights.to(h.dtype)[:, None]
        return h.new_zeros(h.shape).index_add_(0, self.rows, h.index_select(0, self.cols) * w)


class GraphConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_in, c_out))

    def forward(self, h, adj: GraphAdjacency):
        return F.relu(adj.apply(h @ self.weight))


class GraphRefiner(nn.Module):
    def __init__(self, widths=(768, 256, 256, 256)):
        super().__init__()
        self.layers = nn.ModuleList(GraphConv(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, h, adj):
        for layer in self.layers:
            h = layer(h, adj)
        return h


class Head(nn.Module):
    def __init__(self, c_in=256, hidden=128, c_out=3):
        super().__init__()
        self.fc1 = nn.Linear(c_in, hidden)
        self.fc2 = nn.Linear(hidden, c_out)

    def forward(self, h):
        return self.fc2(F.relu(self.fc1(h)))


def vertex_sample_grid(vertices, pose: CameraPose):
    """Normalized ``[-1, 1]`` sampling coordinates of projected vertices.

    Returns ``(grid (N, 2), valid (N,))``; vertices behind the near plane
    are flagged invalid.
    """
    xyz = project_points(np.asarray(vertices, dtype=np.float64), pose)
    grid = np.stack([2.0 * xyz[:, 0] / pose.width - 1.0, 2.0 * xyz[:, 1] / pose.height - 1.0], axis=1)
    valid = xyz[:, 2] > pose.near
    grid[~valid] = 0.0
    return grid, valid


def pool_vertex_features(maps, grid, valid=None):
    """Bilinearly sample every map at the vertex locations and concatenate.

    ``grid`` holds normalized coordinates (``-1``/``1`` are the outer image
    edges); locations outside the map clamp to the border. Invalid vertices
    get zero features.
    """
    grid_t = torch.as_tensor(grid).to(maps[0].dtype).reshape(1, 1, -1, 2)
    feats = []
    for fmap in maps:
        s = F.grid_sample(fmap, grid_t, mode="bilinear", padding_mode="border", align_corners=False)
        feats.append(s[0, :, 0, :].T)
    out = torch.cat(feats, dim=1)
    if valid is not None and not np.all(valid):
        out = out * torch.as_tensor(np.asarray(valid), dtype=out.dtype)[:, None]
    return out


class RefineModel(nn.Module):
    """Per-instance refinement network mapping (silhouette, mesh, pose) to
    vertex displacements and symmetry confidences."""

    def __init__(self, seed: int = 0, encoder_size=(224, 224)):
        super().__init__()
        self.seed = int(seed)
        self.encoder_size = tuple(int(s) for s in encoder_size)
        self.encoder = SilhouetteEncoder()
        self.refiner = GraphRefiner()
        self.head_dis = Head(256, 128, 3)
        self.head_conf = Head(256, 128, 1)
        self.reset_parameters(self.seed)
        n = self.num_parameters()
        if n > MAX_PARAMETERS:
            raise ValueError("model has %d parameters, budget is %d" % (n, MAX_PARAMETERS))

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 2 and name.startswith("refiner"):
                    # stored (in, out): fan-in is the first dim
                    nn.init.kaiming_uniform_(p.T, nonlinearity="relu", generator=gen)
                else:
                    nn.init.kaiming_uniform_(p, nonlinearity="relu", generator=gen)
            self.head_dis.fc2.weight.mul_(DISPLACEMENT_INIT_GAIN)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def encode(self, silhouette: torch.Tensor):
        x = silhouette.to(next(self.parameters()).dtype)
        x = x.reshape(1, 1, *x.shape[-2:])
        if tuple(x.shape[-2:]) != (self.encoder_size[1], self.encoder_size[0]):
            x = F.interpolate(x, size=(self.encoder_size[1], self.encoder_size[0]),
                              mode="bilinear", align_corners=False)
        return self.encoder(x)

    def forward(self, silhouette: torch.Tensor, adj: GraphAdjacency, grid, valid=None):
        maps = self.encode(silhouette)
        feats = pool_vertex_features(maps, grid, valid)
        h = self.refiner(feats, adj)
        return head_displacement(h, self.head_dis), head_confidence(h, self.head_conf)


def head_displacement(h, head: Head):
    return head(h)


def head_confidence(h, head: Head):
    return torch.sigmoid(head(h)).clamp(CONF_MIN, 1.0)


def forward(silhouette, mesh, pose: CameraPose, model: RefineModel):
    """Run ``model`` on a coarse mesh; returns ``(V_dis (N, 3), V_sConf (N, 1))``."""
    grid, valid = vertex_sample_grid(mesh.vertices, pose)
    sil = torch.as_tensor(np.asarray(silhouette)) if not isinstance(silhouette, torch.Tensor) else silhouette
    return model(sil, GraphAdjacency.from_mesh(mesh), grid, valid)
