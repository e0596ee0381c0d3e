"""Small seeded 3D CNNs covering every supported block type."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class PlainNet(nn.Module):
    """conv/relu stack with a max pool and a linear head."""

    def __init__(self, in_channels=3, classes=5):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, 8, 3, padding=1)
        self.conv2 = nn.Conv3d(8, 8, 3, padding=1)
        self.pool = nn.MaxPool3d(2)
        self.head = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(8, classes)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = self.pool(x)
        x = F.relu(self.conv2(x))
        x = self.head(x)
        x = torch.flatten(x, 1)
        return self.fc(x)


class BnNet(nn.Module):
    """conv+BN pairs; exporting folds the BN into the convolutions."""

    def __init__(self, in_channels=3, classes=5):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, 8, 3, padding=1)
        self.bn1 = nn.BatchNorm3d(8)
        self.conv2 = nn.Conv3d(8, 8, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(8)
        self.head = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(8, classes)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = self.head(x)
        x = torch.flatten(x, 1)
        return self.fc(x)


class ResidualNet(nn.Module):
    """stem conv plus an identity-shortcut block with folded BN."""

    def __init__(self, in_channels=3, classes=5):
        super().__init__()
        self.stem = nn.Conv3d(in_channels, 8, 3, padding=1)
        self.conv1 = nn.Conv3d(8, 8, 3, padding=1)
        self.bn1 = nn.BatchNorm3d(8)
        self.conv2 = nn.Conv3d(8, 8, 3, padding=1)
        self.head = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(8, classes)

    def forward(self, x):
        x = F.relu(self.stem(x))
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.conv2(y)
        x = F.relu(x + y)
        x = self.head(x)
        x = torch.flatten(x, 1)
        return self.fc(x)


class GroupedNet(nn.Module):
    def __init__(self, in_channels=3, classes=5):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, 8, 3, padding=1)
        self.conv2 = nn.Conv3d(8, 8, 3, padding=1, groups=2)
        self.head = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(8, classes)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = self.head(x)
        x = torch.flatten(x, 1)
        return self.fc(x)


class BranchNet(nn.Module):
    """two uneven branches concatenated channel-wise; softmax on the way out."""

    def __init__(self, in_channels=3, classes=5):
        super().__init__()
        self.stem = nn.Conv3d(in_channels, 8, 3, padding=1)
        self.a1 = nn.Conv3d(8, 6, 3, padding=1)
        self.a2 = nn.Conv3d(6, 6, 3, padding=1)
        self.b1 = nn.Conv3d(8, 4, 1)
        self.head = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(10, classes)

    def forward(self, x):
        x = F.relu(self.stem(x))
        a = self.a2(F.relu(self.a1(x)))
        b = self.b1(x)
        x = F.relu(torch.cat([a, b], dim=1))
        x = self.head(x)
        x = torch.flatten(x, 1)
        return F.softmax(self.fc(x), dim=1)


ZOO = {
    "toy-plain": PlainNet,
    "toy-bn": BnNet,
    "toy-residual": ResidualNet,
    "toy-grouped": GroupedNet,
    "toy-branch": BranchNet,
}


def build(name: str, seed: int = 42, **kwargs) -> nn.Module:
    if name not in ZOO:
        raise KeyError(f"unknown zoo model '{name}'; choose from {sorted(ZOO)}")
    torch.manual_seed(seed)
    model = ZOO[name](**kwargs)
    # give the BN layers non-trivial running statistics
    torch.manual_seed(seed + 1)
    model.train()
    with torch.no_grad():
        for _ in range(3):
            model(torch.randn(2, 3, 4, 8, 8))
    model.eval()
    return model
