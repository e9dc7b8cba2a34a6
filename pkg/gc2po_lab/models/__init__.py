"""
モデルパッケージ
"""
